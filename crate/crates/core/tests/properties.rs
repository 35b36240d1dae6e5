use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;

use iontrap::crystal_modes::{self, PartitionOptions, FluorescenceModel};
use iontrap::measurement_sim::{self as ms, Noise, Sideband};
use iontrap::motion_dynamics as md;
use iontrap::trap_model::{find_well, fit_quartic, BasisFn};
use iontrap::waveform_synth::{
    self as ws, AdiabaticOptions, ProfileKind, SeparationDesign, SeparationPath, SynthOptions, VoltageBounds, VoltageTarget,
};
use iontrap::{ElectrodeBasis, PhysicalConstants, TransportProfile};

const ZONE_A: [f64; 5] = [1.289, 0.327, 2.173, 0.310, 1.311];
const D: f64 = 185e-6;

fn c() -> PhysicalConstants {
    PhysicalConstants::default()
}

fn poly(coeffs: Vec<f64>) -> ElectrodeBasis {
    ElectrodeBasis::new(vec!["P".into()], vec![BasisFn::Polynomial { center: 0.0, coeffs }], (-4e-4, 4e-4)).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

fn voltages() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn potential_is_linear_in_voltages(v1 in voltages(), v2 in voltages(), k in -3.0..3.0f64, z in -3.0 * D..3.0 * D) {
        let b = ElectrodeBasis::default_gaussian();
        let sum: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + k * b).collect();
        for order in 0..3 {
            let lhs = b.potential(sum.clone()).unwrap().eval(z, order).unwrap();
            let rhs = b.potential(v1.clone()).unwrap().eval(z, order).unwrap() + k * b.potential(v2.clone()).unwrap().eval(z, order).unwrap();
            let scale = b.potential(v1.iter().zip(&v2).map(|(a, b)| a.abs() + k.abs() * b.abs()).collect()).unwrap().eval(z, order).unwrap().abs();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale.max(1e-300), "order {order}");
        }
    }

    #[test]
    fn solved_well_is_found_where_requested(z0 in -1.5 * D..1.5 * D, f in 1.0e6..3.0e6f64) {
        let b = ElectrodeBasis::default_gaussian();
        let w = 2.0 * PI * f;
        let bounds = VoltageBounds { min: -1e3, max: 1e3 };
        let v = ws::solve_voltages(&b, &VoltageTarget::Well { z0, omega: w }, &ZONE_A, &bounds, &c()).unwrap();
        let well = find_well(&b.potential(v).unwrap(), z0, &c()).unwrap();
        prop_assert!((well.z0 - z0).abs() < 1e-9);
        prop_assert!(close(well.omega, w, 1e-6));
    }

    #[test]
    fn quartic_fit_recovers_polynomial(a in 1e5..1e8f64, b in -1e14..1e14f64, hw in 20e-6..80e-6f64) {
        let basis = poly(vec![0.7, 0.0, a, 0.0, b]);
        let f = fit_quartic(&basis.potential(vec![1.0]).unwrap(), 0.0, hw).unwrap();
        prop_assert!(close(f.a, a, 1e-8), "{} vs {a}", f.a);
        prop_assert!((f.b - b).abs() <= 1e-8 * (b.abs() + a / (hw * hw)), "{} vs {b}", f.b);
    }

    #[test]
    fn doubling_voltages_scales_frequency_by_sqrt2(scale in 0.5..2.0f64, dv in prop::collection::vec(-0.05..0.05f64, 5)) {
        let b = ElectrodeBasis::default_gaussian();
        let v: Vec<f64> = ZONE_A.iter().zip(&dv).map(|(a, d)| scale * (a + d)).collect();
        let one = find_well(&b.potential(v.clone()).unwrap(), -D, &c()).unwrap();
        let two = find_well(&b.potential(v.iter().map(|x| 2.0 * x).collect()).unwrap(), one.z0, &c()).unwrap();
        prop_assert!((one.z0 - two.z0).abs() < 1e-12);
        prop_assert!(close(two.omega / one.omega, 2f64.sqrt(), 1e-9));
    }

    #[test]
    fn constant_velocity_spectrum_closed_form(v in 1.0..200.0f64, w in 2.0 * PI * 2e5..2.0 * PI * 5e6f64, tt in 1e-6..2e-5f64) {
        let p = TransportProfile::new(ProfileKind::ConstantVelocity, 0.0, v * tt, tt).unwrap();
        let f = ws::spectral_criterion(&p, w).unwrap();
        let exact = (Complex64::from_polar(1.0, w * tt) - 1.0) * Complex64::new(0.0, -v / w);
        prop_assert!((f - exact).norm() <= 1e-10 * v * tt);
    }

    #[test]
    fn quadrature_matches_closed_form(v in 1.0..200.0f64, w in 2.0 * PI * 2e5..2.0 * PI * 5e6f64, tt in 1e-6..2e-5f64) {
        let k = c();
        let q = md::alpha_transport_quadrature(|_| v, w, tt, &k).unwrap().alpha;
        let exact = Complex64::new(0.0, (k.ion_mass * w / (2.0 * k.hbar)).sqrt() * v / w) * (1.0 - Complex64::from_polar(1.0, -w * tt));
        let scale = (k.ion_mass * w / (2.0 * k.hbar)).sqrt() * 2.0 * v / w;
        prop_assert!((q - exact).norm() <= 1e-9 * scale);
        prop_assert!((md::alpha_impulsive(v, w, tt, &k).unwrap().alpha - exact).norm() <= 1e-12 * scale);
    }

    #[test]
    fn excitation_vanishes_at_whole_periods(v in 1.0..200.0f64, n in 1u32..40, tt in 1e-6..2e-5f64) {
        let k = c();
        let w = 2.0 * PI * n as f64 / tt;
        let scale = (k.ion_mass * w / (2.0 * k.hbar)).sqrt() * 2.0 * v / w;
        prop_assert!(md::alpha_impulsive(v, w, tt, &k).unwrap().alpha.norm() <= 1e-12 * scale);
        let p = TransportProfile::new(ProfileKind::ConstantVelocity, 0.0, v * tt, tt).unwrap();
        prop_assert!(ws::spectral_criterion(&p, w).unwrap().norm() <= 1e-10 * v * tt);
    }

    #[test]
    fn flopping_traces_are_probabilities(
        nbar in 0.0..20.0f64,
        eta in 0.05..0.6f64,
        gamma in 0.0..2e4f64,
        coherent in any::<bool>(),
        sigma in 0.0..0.3f64,
        seed in any::<u64>(),
    ) {
        let dist = if coherent { ms::coherent_dist(nbar.sqrt(), None) } else { ms::thermal_dist(nbar, None) }.unwrap();
        let times: Vec<f64> = (0..60).map(|k| k as f64 * 1e-6).collect();
        let tr = ms::flopping_trace(&dist, Sideband::Mas, 2.0 * PI * 1e5, eta, gamma, &times).unwrap();
        prop_assert!(tr.p_down.iter().all(|p| (0.0..=1.0).contains(p)));
        let noisy = ms::add_noise(&tr, Noise::Gaussian { sigma }, seed).unwrap();
        prop_assert!(noisy.p_down.iter().all(|p| (0.0..=1.0).contains(p)));
        let shots = ms::add_noise(&tr, Noise::Binomial { repetitions: 100 }, seed).unwrap();
        prop_assert!(shots.p_down.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn modes_orthonormal_and_complete(n in 2usize..6, f in 0.5e6..3e6f64, quartic in 0.0..1e14f64) {
        let k = c();
        let b = poly(vec![0.0, 0.0, 0.5 * k.curvature_for(2.0 * PI * f), 0.0, quartic]);
        let pot = b.potential(vec![1.0]).unwrap();
        let seed: Vec<f64> = (0..n).map(|i| (i as f64 - (n - 1) as f64 / 2.0) * 5e-6).collect();
        let eq = crystal_modes::equilibrium_positions(&pot, n, &seed, &k).unwrap();
        let s = crystal_modes::mode_spectrum(&pot, &eq, &k).unwrap();
        prop_assert!(s.max_orthonormality_error() < 1e-10);
        prop_assert!(s.frequencies.iter().all(|w| *w > 0.0));
        // trace of the curvature matrix is the sum of ω²·m/q
        let kc = k.coulomb_volts();
        let z = &eq.positions;
        let trace: f64 = (0..n)
            .map(|i| pot.eval(z[i], 2).unwrap() + (0..n).filter(|j| *j != i).map(|j| 2.0 * kc / (z[i] - z[j]).abs().powi(3)).sum::<f64>())
            .sum();
        let from_modes: f64 = s.frequencies.iter().map(|w| k.curvature_for(*w)).sum();
        prop_assert!(close(trace, from_modes, 1e-10));
    }

    #[test]
    fn harmonic_com_mode_is_uniform_at_trap_frequency(n in 2usize..7, f in 0.5e6..3e6f64) {
        let k = c();
        let w = 2.0 * PI * f;
        let b = poly(vec![0.0, 0.0, 0.5 * k.curvature_for(w)]);
        let pot = b.potential(vec![1.0]).unwrap();
        let seed: Vec<f64> = (0..n).map(|i| (i as f64 - (n - 1) as f64 / 2.0) * 4e-6).collect();
        let eq = crystal_modes::equilibrium_positions(&pot, n, &seed, &k).unwrap();
        let s = crystal_modes::mode_spectrum(&pot, &eq, &k).unwrap();
        prop_assert!(close(s.frequencies[0], w, 1e-9));
        let u = &s.mode_vectors[0];
        prop_assert!(u.iter().all(|x| (x - 1.0 / (n as f64).sqrt()).abs() < 1e-8));
    }

    #[test]
    fn equilibrium_is_a_local_minimum(n in 1usize..6, f in 0.5e6..3e6f64, quartic in 0.0..1e14f64, dir in prop::collection::vec(-1.0..1.0f64, 6)) {
        let k = c();
        let coeffs = vec![0.0, 0.0, 0.5 * k.curvature_for(2.0 * PI * f), 0.0, quartic];
        let b = poly(coeffs);
        let pot = b.potential(vec![1.0]).unwrap();
        let seed: Vec<f64> = (0..n).map(|i| (i as f64 - (n - 1) as f64 / 2.0) * 5e-6).collect();
        let eq = crystal_modes::equilibrium_positions(&pot, n, &seed, &k).unwrap();
        let kc = k.coulomb_volts();
        let energy = |z: &[f64]| {
            let mut e: f64 = z.iter().map(|x| pot.eval(*x, 0).unwrap()).sum();
            for i in 0..n {
                for j in i + 1..n {
                    e += kc / (z[j] - z[i]);
                }
            }
            e
        };
        let e0 = energy(&eq.positions);
        let norm = dir[..n].iter().map(|d| d * d).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let h = 50e-9;
        let moved: Vec<f64> = eq.positions.iter().zip(&dir).map(|(z, d)| z + h * d / norm).collect();
        prop_assert!(energy(&moved) > e0);
    }

    #[test]
    fn transport_waveforms_round_trip(
        za in -1.2 * D..1.2 * D,
        zb in -1.2 * D..1.2 * D,
        periods in 100usize..500,
        f in 1.5e6..2.5e6f64,
        minjerk in any::<bool>(),
    ) {
        let k = c();
        let b = ElectrodeBasis::default_gaussian();
        let kind = if minjerk { ProfileKind::MinJerk } else { ProfileKind::SineSquared };
        let opts = SynthOptions::default();
        // durations on the DAC grid, so every sample is a solved knot
        let tt = periods as f64 * opts.dac_period;
        let p = TransportProfile::new(kind, za, zb, tt).unwrap();
        let w = 2.0 * PI * f;
        let n = ws::dac_intervals(tt, opts.dac_period);
        prop_assert_eq!(n, periods);
        let wf = match ws::synth_transport(&b, &p, w, n, &ZONE_A, &opts, &k) {
            Ok(wf) => wf,
            // a fast long move may need more than the slew or voltage limits allow
            Err(e) => { prop_assert_eq!(e.class(), iontrap::ErrorClass::Infeasible, "{}", e); return Ok(()); }
        };
        prop_assert!(wf.max_step() <= opts.max_dac_step * (1.0 + 1e-12));
        let times = wf.times();
        for j in (0..wf.len()).step_by(7).chain([wf.len() - 1]) {
            let well = find_well(&b.potential(wf.samples()[j].clone()).unwrap(), p.position(times[j]), &k).unwrap();
            prop_assert!((well.z0 - p.position(times[j])).abs() < 1e-8);
            prop_assert!(close(well.omega, w, 1e-4));
        }
    }

    #[test]
    fn adiabatic_schedule_certificate_within_bound(eps in 0.005..0.05f64, f0 in 0.3e6..3e6f64, ratio in 1.2..4.0f64) {
        let path = |s: f64| vec![s];
        let w0 = 2.0 * PI * f0;
        let mut freq = |s: f64| Ok(vec![w0 * (1.0 + (ratio - 1.0) * s * s), 2.0 * w0 * ratio]);
        let sch = ws::reparametrize_adiabatic(&path, &mut freq, (0.0, 1.0), eps, &AdiabaticOptions::default()).unwrap();
        prop_assert!(sch.certificate <= eps * (1.0 + 1e-6), "{} > {eps}", sch.certificate);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn partition_count_is_monotone_in_offset(n in 2usize..7, mut offsets in prop::collection::vec(-0.6..0.6f64, 6)) {
        offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = c();
        let b = ElectrodeBasis::default_gaussian();
        let ramp = SeparationDesign::default().build(&b, &VoltageBounds::default(), &k).unwrap();
        let path = SeparationPath::new(&b, ramp).unwrap();
        let pts = crystal_modes::partition_scan(&path, n, &offsets, &k, &PartitionOptions::default(), &FluorescenceModel::default()).unwrap();
        prop_assert!(pts.iter().all(|p| p.left + p.right == n));
        prop_assert!(pts.windows(2).all(|w| w[1].left >= w[0].left), "{:?}", pts.iter().map(|p| p.left).collect::<Vec<_>>());
    }
}
