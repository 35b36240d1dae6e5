use std::f64::consts::PI;

use num_complex::Complex64;

use iontrap::crystal_modes::{self, PartitionOptions, VoltagePath};
use iontrap::motion_dynamics::{self as md, IntegrationOptions, WaveformDrive};
use iontrap::trap_model::{find_well, BasisFn};
use iontrap::waveform_synth::{
    self as ws, ProfileKind, SeparationDesign, SeparationOptions, SeparationPath, SynthOptions, VoltageBounds,
    VoltageTarget,
};
use iontrap::{ElectrodeBasis, PhysicalConstants, TrajectoryState, TransportProfile};

const ZONE_A: [f64; 5] = [1.289, 0.327, 2.173, 0.310, 1.311];
const D: f64 = 185e-6;

fn c() -> PhysicalConstants {
    PhysicalConstants::default()
}

#[test]
fn solved_well_round_trips_through_find_well() {
    let b = ElectrodeBasis::default_gaussian();
    for (z0, f) in [(-D, 2.0e6), (-150e-6, 1.972e6), (40e-6, 2.5e6), (D, 1.5e6)] {
        let w = 2.0 * PI * f;
        let v = ws::solve_voltages(&b, &VoltageTarget::Well { z0, omega: w }, &ZONE_A, &VoltageBounds::default(), &c()).unwrap();
        let p = b.potential(v).unwrap();
        let well = find_well(&p, z0 + 5e-6, &c()).unwrap();
        assert!((well.z0 - z0).abs() < 1e-9, "{} vs {z0}", well.z0);
        assert!((well.omega / w - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zone_a_reference_solves_for_two_megahertz() {
    let b = ElectrodeBasis::default_gaussian();
    let p0 = b.potential(ZONE_A.to_vec()).unwrap();
    let z0 = find_well(&p0, -D, &c()).unwrap().z0;
    let v = ws::solve_voltages(&b, &VoltageTarget::Well { z0, omega: 2.0 * PI * 2e6 }, &ZONE_A, &VoltageBounds::default(), &c())
        .unwrap();
    let w = find_well(&b.potential(v).unwrap(), -D, &c()).unwrap();
    assert!(w.z0 > -2.0 * D && w.z0 < 0.0);
    assert!((w.omega / (2.0 * PI * 2e6) - 1.0).abs() < 1e-9);
}

#[test]
fn stationary_profile_gives_constant_waveform() {
    let b = ElectrodeBasis::default_gaussian();
    let p = TransportProfile::new(ProfileKind::SineSquared, -D, -D, 2e-6).unwrap();
    let wf = ws::synth_transport(&b, &p, 2.0 * PI * 2e6, 100, &ZONE_A, &SynthOptions::default(), &c()).unwrap();
    assert!(wf.samples().iter().all(|s| s == wf.first()));
}

#[test]
fn transport_waveform_reproduces_the_commanded_well() {
    let b = ElectrodeBasis::default_gaussian();
    let w = 2.0 * PI * 1.972e6;
    let p = TransportProfile::new(ProfileKind::SineSquared, -D, D, 8e-6).unwrap();
    let wf = ws::synth_transport(&b, &p, w, 400, &ZONE_A, &SynthOptions::default(), &c()).unwrap();
    assert_eq!(wf.intervals(), 400);
    assert_eq!(wf.len(), 401);
    let mut prev = -D;
    for (t, v) in wf.times().iter().zip(wf.samples()) {
        let well = find_well(&b.potential(v.clone()).unwrap(), prev, &c()).unwrap();
        assert!((well.z0 - p.position(*t)).abs() < 1e-8, "t = {t}");
        assert!((well.omega / w - 1.0).abs() < 1e-4);
        prev = well.z0;
    }
    assert!(wf.max_step() <= SynthOptions::<f64>::default().max_dac_step);
}

#[test]
fn spectral_criterion_closed_forms() {
    let (v, tt) = (46.25, 8e-6);
    let p = TransportProfile::new(ProfileKind::ConstantVelocity, 0.0, v * tt, tt).unwrap();
    let w = PI / tt;
    assert!((ws::spectral_criterion(&p, w).unwrap().norm() / (2.0 * v / w) - 1.0).abs() < 1e-12);
    let still = TransportProfile::new(ProfileKind::MinJerk, 1e-5, 1e-5, tt).unwrap();
    assert_eq!(ws::spectral_criterion(&still, w).unwrap().norm(), 0.0);
}

#[test]
fn separation_ends_symmetric_with_one_ion_per_well() {
    let b = ElectrodeBasis::default_gaussian();
    let opts = SeparationOptions::default();
    let ramp = SeparationDesign::default().build(&b, &opts.synth.bounds, &c()).unwrap();
    let res = ws::synth_separation(&b, &ramp, 2, &opts, &c()).unwrap();
    let fin = b.potential(res.waveform.last().to_vec()).unwrap();
    let wa = find_well(&fin, -D, &c()).unwrap();
    let wb = find_well(&fin, D, &c()).unwrap();
    assert!(((wa.omega - wb.omega) / wa.omega).abs() < 1e-6);
    assert!((wa.z0 + wb.z0).abs() < 1e-9);

    // the lowest mode has a single interior minimum, next to where a changes sign
    let low: Vec<f64> = res.frequencies.iter().map(|f| f[0]).collect();
    let kmin = (0..low.len()).min_by(|i, j| low[*i].partial_cmp(&low[*j]).unwrap()).unwrap();
    assert!(kmin > 0 && kmin < low.len() - 1);
    let minima = (1..low.len() - 1).filter(|k| low[*k] < low[k - 1] && low[*k] <= low[k + 1]).count();
    assert_eq!(minima, 1);
    assert!((res.s[kmin] - res.crossing.s).abs() < 0.05, "{} vs {}", res.s[kmin], res.crossing.s);

    let path = SeparationPath::new(&b, ramp).unwrap();
    let part = crystal_modes::partition_count(&path, 2, 0.0, &c(), &PartitionOptions::default()).unwrap();
    assert_eq!((part.left, part.right), (1, 1));
    assert_eq!(path.voltages_at(1.0), res.waveform.last());
}

#[test]
fn spectral_zero_means_no_excitation() {
    let tt = 8e-6;
    let p = TransportProfile::new(ProfileKind::SineSquared, -D, D, tt).unwrap();
    let w = ws::nearest_spectral_zero(&p, 2.0 * PI * 2e6).unwrap();
    assert!(md::alpha_for_profile(&p, w, &c()).unwrap().alpha.norm() < 1e-6);
    assert_eq!(md::alpha_transport_quadrature(|_| 0.0, w, tt, &c()).unwrap().alpha.norm(), 0.0);
    assert_eq!(md::alpha_impulsive(0.0, w, tt, &c()).unwrap().alpha.norm(), 0.0);
    // full-period constant-velocity transport: both the spectrum and α vanish
    for n in [3, 16] {
        let w = 2.0 * PI * n as f64 / tt;
        let cv = TransportProfile::new(ProfileKind::ConstantVelocity, 0.0, 46.25 * tt, tt).unwrap();
        assert!(ws::spectral_criterion(&cv, w).unwrap().norm() < 1e-12 * 46.25 * tt);
        assert!(md::alpha_impulsive(46.25, w, tt, &c()).unwrap().alpha.norm() < 1e-10);
    }
}

#[test]
fn tuned_waveform_transport_is_cold() {
    let b = ElectrodeBasis::default_gaussian();
    let p = TransportProfile::new(ProfileKind::SineSquared, -D, D, 8e-6).unwrap();
    let w = ws::nearest_spectral_zero(&p, 2.0 * PI * 2e6).unwrap();
    let wf = ws::synth_transport(&b, &p, w, 400, &ZONE_A, &SynthOptions::default(), &c()).unwrap();
    let drive = WaveformDrive::new(&wf, &b).unwrap();
    let start = find_well(&b.potential(wf.first().to_vec()).unwrap(), -D, &c()).unwrap();
    let tr = md::integrate_classical(&drive, &TrajectoryState::at_rest(0.0, vec![start.z0]), wf.duration(), &c(), &Default::default())
        .unwrap();
    let fin = drive.final_potential().unwrap();
    let eq = crystal_modes::equilibrium_positions(&fin, 1, &tr.final_lab().positions, &c()).unwrap();
    let spec = crystal_modes::mode_spectrum(&fin, &eq, &c()).unwrap();
    let a = md::extract_mode_alphas(tr.final_lab(), &eq, &spec, &c()).unwrap();
    assert!(a[0].nbar() < 0.05, "{}", a[0].nbar());
}

fn polynomial_well(coeffs: Vec<f64>) -> ElectrodeBasis {
    ElectrodeBasis::new(vec!["P".into()], vec![BasisFn::Polynomial { center: 0.0, coeffs }], (-4e-4, 4e-4)).unwrap()
}

#[test]
fn resting_crystal_stays_put() {
    let k = c();
    let b = polynomial_well(vec![0.0, 0.0, 0.5 * k.curvature_for(2.0 * PI * 2e6)]);
    let wf = iontrap::VoltageWaveform::constant(vec!["P".into()], 20e-9, vec![1.0], 10).unwrap();
    let drive = WaveformDrive::new(&wf, &b).unwrap();
    let pot = b.potential(vec![1.0]).unwrap();
    let eq = crystal_modes::equilibrium_positions(&pot, 2, &[-2e-6, 2e-6], &k).unwrap();
    let t_end = 100.0 / 2e6;
    let tr = md::integrate_crystal(&drive, &TrajectoryState::at_rest(0.0, eq.positions.clone()), t_end, &k, &Default::default())
        .unwrap();
    for (a, b) in tr.final_lab().positions.iter().zip(&eq.positions) {
        assert!((a - b).abs() < 1e-12, "{:e}", a - b);
    }
    let spec = crystal_modes::mode_spectrum(&pot, &eq, &k).unwrap();
    let a = md::extract_mode_alphas(&TrajectoryState::at_rest(0.0, eq.positions.clone()), &eq, &spec, &k).unwrap();
    assert!(a.iter().all(|a| a.alpha == Complex64::new(0.0, 0.0)));
}

/// U(z+δ) − U(z) for a polynomial about 0, without cancellation.
fn poly_delta(coeffs: &[f64], z: f64, d: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, c)| c * d * (0..k).map(|j| (z + d).powi(j as i32) * z.powi((k - 1 - j) as i32)).sum::<f64>())
        .sum()
}

#[test]
fn mode_energies_sum_to_classical_excess_energy() {
    let k = c();
    let coeffs = vec![0.0, 0.0, 0.5 * k.curvature_for(2.0 * PI * 1.5e6), 0.0, 4e13];
    let b = polynomial_well(coeffs.clone());
    let pot = b.potential(vec![1.0]).unwrap();
    let eq = crystal_modes::equilibrium_positions(&pot, 3, &[-4e-6, 0.0, 4e-6], &k).unwrap();
    let spec = crystal_modes::mode_spectrum(&pot, &eq, &k).unwrap();
    let dz = [1.0e-12, -0.4e-12, 0.7e-12];
    let v = [2e-6, 1.5e-6, -3e-6];
    let z = &eq.positions;
    let state = TrajectoryState {
        t: 0.0,
        positions: z.iter().zip(dz).map(|(z, d)| z + d).collect(),
        velocities: v.to_vec(),
    };
    // excess energy per charge: external part, Coulomb part, kinetic part
    let kc = k.coulomb_volts();
    let mut de: f64 = z.iter().zip(dz).map(|(z, d)| poly_delta(&coeffs, *z, d)).sum();
    for i in 0..3 {
        for j in i + 1..3 {
            // 1/(r+e) − 1/r with e kept exact
            let r = z[j] - z[i];
            let e = dz[j] - dz[i];
            de -= kc * e / (r * (r + e));
        }
    }
    let classical = k.elementary_charge * de + 0.5 * k.ion_mass * v.iter().map(|v| v * v).sum::<f64>();
    let quantum: f64 = md::extract_mode_alphas(&state, &eq, &spec, &k)
        .unwrap()
        .iter()
        .map(|a| k.hbar * a.omega * a.nbar())
        .sum();
    assert!((quantum / classical - 1.0).abs() < 1e-6, "{quantum} vs {classical}");
}

#[test]
fn oscillation_energy_is_conserved() {
    let k = c();
    let b = ElectrodeBasis::default_gaussian();
    let wf = iontrap::VoltageWaveform::constant(b.names().to_vec(), 20e-9, ZONE_A.to_vec(), 1).unwrap();
    let drive = WaveformDrive::new(&wf, &b).unwrap();
    let pot = b.potential(ZONE_A.to_vec()).unwrap();
    let well = find_well(&pot, -D, &k).unwrap();
    let energy = |s: &TrajectoryState| {
        k.elementary_charge * (pot.eval(s.positions[0], 0).unwrap() - pot.eval(well.z0, 0).unwrap())
            + 0.5 * k.ion_mass * s.velocities[0] * s.velocities[0]
    };
    let init = TrajectoryState::at_rest(0.0, vec![well.z0 + 1e-6]);
    let periods = 1000.0 * 2.0 * PI / well.omega;
    // the default absolute tolerance is far too loose for this; see the notes
    let opts = IntegrationOptions { rtol: 1e-14, atol_position: 1e-18, ..Default::default() };
    let tr = md::integrate_classical(&drive, &init, periods, &k, &opts).unwrap();
    let drift = (energy(tr.final_lab()) / energy(&init) - 1.0).abs();
    assert!(drift < 1e-8, "relative drift {drift:.3e}");
}

#[test]
fn separation_leaves_finite_per_ion_excitation() {
    let b = ElectrodeBasis::default_gaussian();
    let k = c();
    let opts = SeparationOptions::default();
    let ramp = SeparationDesign::default().build(&b, &opts.synth.bounds, &k).unwrap();
    let res = ws::synth_separation(&b, &ramp, 2, &opts, &k).unwrap();
    let start = b.potential(res.waveform.first().to_vec()).unwrap();
    let eq = crystal_modes::equilibrium_positions(&start, 2, &[-2e-6, 2e-6], &k).unwrap();
    let drive = WaveformDrive::new(&res.waveform, &b).unwrap();
    let tr = md::integrate_crystal(&drive, &TrajectoryState::at_rest(0.0, eq.positions), res.duration(), &k, &Default::default())
        .unwrap();
    let a = md::extract_local_alphas(tr.final_lab(), &drive.final_potential().unwrap(), &k).unwrap();
    let fin = tr.final_lab();
    assert!(fin.positions[0] < -D / 2.0 && fin.positions[1] > D / 2.0);
    // regression values for the default design
    for x in &a {
        assert!(x.nbar().is_finite() && x.nbar() > 0.0);
        assert!((x.nbar() - 0.8225).abs() < 0.01, "{}", x.nbar());
    }
}

#[test]
fn single_precision_transport_synthesis() {
    let b = iontrap::trap_model::ElectrodeBasis::<f32>::default_gaussian();
    let k = iontrap::constants::PhysicalConstants::<f32>::default();
    let p = iontrap::waveform_synth::TransportProfile::new(ProfileKind::SineSquared, -1.85e-4_f32, 0.0, 4e-6).unwrap();
    let v: Vec<f32> = ZONE_A.iter().map(|x| *x as f32).collect();
    let wf = ws::synth_transport(&b, &p, 2.0 * std::f32::consts::PI * 2e6, 200, &v, &SynthOptions::default(), &k).unwrap();
    assert_eq!(wf.len(), 201);
    let end = find_well(&b.potential(wf.last().to_vec()).unwrap(), 0.0, &k).unwrap();
    assert!(end.z0.abs() < 1e-7);
}
