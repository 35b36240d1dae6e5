use std::f64::consts::PI;

use iontrap::crystal_modes::{self, FluorescenceModel, PartitionOptions, VoltagePath};
use iontrap::spline::CubicSpline;
use iontrap::trap_model::{find_well, fit_quartic, BasisFn, MIN_TABLE_SAMPLES};
use iontrap::waveform_synth::{SeparationDesign, SeparationPath, VoltageBounds};
use iontrap::{ElectrodeBasis, PhysicalConstants};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ZONE_A: [f64; 5] = [1.289, 0.327, 2.173, 0.310, 1.311];
const D: f64 = 185e-6;

fn gaussian(z: f64, c: f64, w: f64) -> f64 {
    (-(z - c) * (z - c) / (2.0 * w * w)).exp()
}

#[test]
fn tabulated_basis_tracks_its_generator() {
    let w = 100e-6;
    let centers = [-2.0 * D, -D, 0.0, D, 2.0 * D];
    let n = 4 * MIN_TABLE_SAMPLES;
    let z: Vec<f64> = (0..n).map(|k| -3.0 * D + 6.0 * D * k as f64 / (n - 1) as f64).collect();
    let fns = centers
        .iter()
        .map(|c| BasisFn::Tabulated(CubicSpline::new(z.clone(), z.iter().map(|z| gaussian(*z, *c, w)).collect()).unwrap()))
        .collect();
    let names = ["O1", "A", "X", "B", "O2"].iter().map(|s| s.to_string()).collect();
    let tab = ElectrodeBasis::new(names, fns, (-3.0 * D, 3.0 * D)).unwrap();
    let p = tab.potential(ZONE_A.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let peak = ZONE_A.iter().cloned().fold(0.0, f64::max);
    for _ in 0..100 {
        let x = rng.random_range(-3.0 * D..3.0 * D);
        let exact: f64 = centers.iter().zip(ZONE_A).map(|(c, v)| v * gaussian(x, *c, w)).sum();
        assert!((p.eval(x, 0).unwrap() - exact).abs() < 1e-6 * peak, "z = {x}");
    }
}

#[test]
fn too_few_table_samples_are_rejected() {
    let z: Vec<f64> = (0..50).map(|k| k as f64 * 1e-6).collect();
    let s = CubicSpline::new(z.clone(), z.clone()).unwrap();
    assert!(ElectrodeBasis::new(vec!["A".into()], vec![BasisFn::Tabulated(s)], (0.0, 49e-6)).is_err());
}

#[test]
fn zone_a_well_matches_grid_minimum() {
    let b = ElectrodeBasis::default_gaussian();
    let p = b.potential(ZONE_A.to_vec()).unwrap();
    let c = PhysicalConstants::default();
    let w = find_well(&p, -D, &c).unwrap();
    let h = 1e-8;
    let n = (2.0 * D / h) as usize;
    let (mut best, mut zbest) = (f64::INFINITY, 0.0);
    for k in 0..=n {
        let z = -2.0 * D + k as f64 * h;
        let u = p.eval(z, 0).unwrap();
        if u < best {
            best = u;
            zbest = z;
        }
    }
    assert!(w.z0 > -2.0 * D && w.z0 < 0.0);
    assert!((w.z0 - zbest).abs() <= 2.0 * h, "{} vs grid {zbest}", w.z0);
    assert!(w.omega > 0.0);
}

#[test]
fn quartic_fit_of_pure_harmonic_has_no_quartic_term() {
    let b = ElectrodeBasis::new(
        vec!["H".into()],
        vec![BasisFn::Polynomial { center: 0.0, coeffs: vec![0.2, 0.0, 3e6] }],
        (-4e-4, 4e-4),
    )
    .unwrap();
    let p = b.potential(vec![1.0]).unwrap();
    let hw = 74e-6;
    let f = fit_quartic(&p, 0.0, hw).unwrap();
    assert!((f.a / 3e6 - 1.0).abs() < 1e-9);
    assert!(f.b.abs() < 1e-9 * f.a / (hw * hw));
}

#[test]
fn separation_midpoint_is_a_wedge() {
    let b = ElectrodeBasis::default_gaussian();
    let c = PhysicalConstants::default();
    let ramp = SeparationDesign::default().build(&b, &VoltageBounds::default(), &c).unwrap();
    let path = SeparationPath::new(&b, ramp).unwrap();
    let p = b.potential(path.voltages_at(0.9)).unwrap();
    let f = fit_quartic(&p, 0.0, b.quartic_half_width()).unwrap();
    assert!(f.a < 0.0 && f.b > 0.0, "{f:?}");
}

#[test]
fn single_ion_equilibrium_is_the_well_minimum() {
    let b = ElectrodeBasis::default_gaussian();
    let c = PhysicalConstants::default();
    let p = b.potential(ZONE_A.to_vec()).unwrap();
    let w = find_well(&p, -D, &c).unwrap();
    let x = crystal_modes::equilibrium_positions(&p, 1, &[-D + 3e-6], &c).unwrap();
    assert!((x.positions[0] - w.z0).abs() < 1e-12);
    let s = crystal_modes::mode_spectrum(&p, &x, &c).unwrap();
    assert!((s.frequencies[0] / w.omega - 1.0).abs() < 1e-9);
}

#[test]
fn modes_are_orthonormal_and_rebuild_the_hessian() {
    let b = ElectrodeBasis::default_gaussian();
    let c = PhysicalConstants::default();
    let p = b.potential(ZONE_A.to_vec()).unwrap();
    for n in 2..=6 {
        let seed: Vec<f64> = (0..n).map(|i| -D + (i as f64 - 2.0) * 4e-6).collect();
        let x = crystal_modes::equilibrium_positions(&p, n, &seed, &c).unwrap();
        let s = crystal_modes::mode_spectrum(&p, &x, &c).unwrap();
        assert!(s.max_orthonormality_error() < 1e-10);
        assert!(s.frequencies.windows(2).all(|w| w[1] > w[0]));
        let h = s.reconstruct_hessian(&c);
        // curvature matrix from U″ and the pairwise Coulomb terms
        let k = c.coulomb_volts();
        let z = &x.positions;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..n {
            for j in 0..n {
                let oracle = if i == j {
                    p.eval(z[i], 2).unwrap() + (0..n).filter(|m| *m != i).map(|m| 2.0 * k / (z[i] - z[m]).abs().powi(3)).sum::<f64>()
                } else {
                    -2.0 * k / (z[i] - z[j]).abs().powi(3)
                };
                diff += (h[(i, j)] - oracle).powi(2);
                norm += oracle * oracle;
            }
        }
        assert!((diff / norm).sqrt() < 1e-9, "n = {n}");
    }
}

#[test]
fn harmonic_com_mode_is_uniform() {
    let c = PhysicalConstants::default();
    for n in [2, 3] {
        let b = ElectrodeBasis::new(
            vec!["H".into()],
            vec![BasisFn::Polynomial { center: 0.0, coeffs: vec![0.0, 0.0, 0.5 * c.curvature_for(2.0 * PI * 1.3e6)] }],
            (-4e-4, 4e-4),
        )
        .unwrap();
        let p = b.potential(vec![1.0]).unwrap();
        let seed: Vec<f64> = (0..n).map(|i| (i as f64 - 1.0) * 5e-6).collect();
        let x = crystal_modes::equilibrium_positions(&p, n, &seed, &c).unwrap();
        let s = crystal_modes::mode_spectrum(&p, &x, &c).unwrap();
        let u = &s.mode_vectors[0];
        let mean = u.iter().sum::<f64>() / n as f64;
        assert!(u.iter().all(|x| (x - mean).abs() < 1e-9), "{u:?}");
    }
}

#[test]
fn partition_limits() {
    let b = ElectrodeBasis::default_gaussian();
    let c = PhysicalConstants::default();
    let ramp = SeparationDesign::default().build(&b, &VoltageBounds::default(), &c).unwrap();
    let path = SeparationPath::new(&b, ramp).unwrap();
    let opts = PartitionOptions::default();
    let p = crystal_modes::partition_count(&path, 2, 0.0, &c, &opts).unwrap();
    assert_eq!((p.left, p.right), (1, 1));
    // raising the right-hand offset electrode pushes the whole crystal left
    let p = crystal_modes::partition_count(&path, 9, 1.0, &c, &opts).unwrap();
    assert_eq!((p.left, p.right), (9, 0));
    let p = crystal_modes::partition_count(&path, 9, -1.0, &c, &opts).unwrap();
    assert_eq!((p.left, p.right), (0, 9));
}

#[test]
fn fluorescence_counts() {
    let f = FluorescenceModel::<f64>::default();
    assert_eq!(f.counts(0), 0.0);
    assert_eq!(f.counts(1), 10.0);
    assert!((2..=9).all(|n| f.counts(n) / n as f64 <= f.counts(n - 1) / (n - 1) as f64));
}
