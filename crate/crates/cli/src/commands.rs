use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};

use iontrap::crystal_modes::{self, FluorescenceModel, PartitionOptions, VoltagePath};
use iontrap::io::{self, ModeExcitation};
use iontrap::measurement_sim::{self as ms, KnownParams, ModelKind, Noise, Sideband};
use iontrap::motion_dynamics::{self as md, IntegrationOptions, PulsedDrive, WaveformDrive};
use iontrap::trap_model::{find_well, fit_quartic};
use iontrap::waveform_synth::{
    self as ws, ProfileKind, SeparationDesign, SeparationOptions, SeparationPath, SynthOptions, VoltageBounds,
    VoltageTarget,
};
use iontrap::{Error, Trap, TrajectoryState};

use crate::config::{Fit, Flop, Partition, Separate, SolveWell, Transport};

/// Summary of one command run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    pub version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
    pub seed: Option<u64>,
    pub trap: Value,
    pub inputs: Value,
    pub outputs: Value,
    pub certificates: Value,
    pub artifacts: Vec<String>,
}

pub struct Context_<'a> {
    pub trap: &'a Trap,
    pub trap_echo: Value,
    pub out: &'a Path,
    pub seed: Option<u64>,
}

impl Context_<'_> {
    fn report(&self, command: &'static str, inputs: impl Serialize) -> RunReport {
        RunReport {
            command,
            version: env!("CARGO_PKG_VERSION"),
            timestamp: None,
            seed: self.seed,
            trap: self.trap_echo.clone(),
            inputs: serde_json::to_value(inputs).unwrap_or(Value::Null),
            outputs: json!({}),
            certificates: json!({}),
            artifacts: Vec::new(),
        }
    }

    fn write(&self, report: &mut RunReport, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.out.join(name);
        io::write_file(&path, bytes)?;
        report.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_with(
        &self,
        report: &mut RunReport,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> iontrap::Result<()>,
    ) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(report, name, &buf)
    }
}

fn arg_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Argument(msg.into()).into()
}

fn pretty(v: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("report serialises");
    s.push(b'\n');
    s
}

fn mode_name(k: usize, n: usize) -> String {
    match (n, k) {
        (1, _) => "axial".into(),
        (_, 0) => "com".into(),
        (_, 1) => "stretch".into(),
        _ => format!("mode_{k}"),
    }
}

pub fn solve_well(ctx: &Context_, p: SolveWell) -> anyhow::Result<RunReport> {
    let t = ctx.trap;
    let mut r = ctx.report("solve-well", &p);
    let z0 = p.z0_um * 1e-6;
    let voltages = if p.omega_mhz.is_nan() {
        p.voltages_v.clone()
    } else {
        if !(p.omega_mhz > 0.0) {
            return Err(arg_err("omega_MHz must be positive"));
        }
        let bounds = VoltageBounds { min: -p.v_limit_v, max: p.v_limit_v };
        let target = VoltageTarget::Well { z0, omega: TAU * p.omega_mhz * 1e6 };
        ws::solve_voltages(&t.basis, &target, &p.voltages_v, &bounds, &t.constants)?
    };
    let pot = t.basis.potential(voltages.clone())?;
    let w = find_well(&pot, z0, &t.constants)?;
    let well = json!({
        "z0_m": w.z0,
        "omega_rad_s": w.omega,
        "f_MHz": w.omega / TAU / 1e6,
        "a_V_per_m2": w.a,
        "b_V_per_m4": w.b,
        "voltages_V": voltages,
        "electrodes": t.basis.names(),
    });
    if !p.omega_mhz.is_nan() {
        r.outputs["requested_omega_MHz"] = json!(p.omega_mhz);
    }
    r.outputs["well"] = well.clone();
    r.certificates["gradient_V_per_m"] = json!(pot.eval(w.z0, 1)?.abs());
    ctx.write(&mut r, "well.json", &pretty(&well))?;
    Ok(r)
}

pub fn transport(ctx: &Context_, p: Transport) -> anyhow::Result<RunReport> {
    let t = ctx.trap;
    let c = &t.constants;
    let mut r = ctx.report("transport", &p);
    let kind: ProfileKind = p.profile.parse()?;
    let tt = p.t_t_us * 1e-6;
    if !(p.omega_mhz > 0.0) {
        return Err(arg_err("omega_MHz must be positive"));
    }
    if p.n_ions == 0 {
        return Err(arg_err("n_ions must be positive"));
    }
    let profile = ws::TransportProfile::new(kind, p.z_start_um * 1e-6, p.z_end_um * 1e-6, tt)?;
    let mut omega = TAU * p.omega_mhz * 1e6;
    if p.tune {
        omega = ws::nearest_spectral_zero(&profile, omega)?;
    }
    omega += p.detune_rad / tt;

    let opts = SynthOptions::default();
    let n_steps = ws::dac_intervals(tt, opts.dac_period);
    let wf = ws::synth_transport(&t.basis, &profile, omega, n_steps, &p.v_ref_v, &opts, c)?;
    let predicted = md::alpha_for_profile(&profile, omega, c)?;
    let spectral = ws::spectral_criterion(&profile, omega)?;

    let start = t.basis.potential(wf.first().to_vec())?;
    let seed: Vec<f64> = if p.n_ions == 1 {
        vec![find_well(&start, profile.z_start, c)?.z0]
    } else {
        let half = (p.n_ions - 1) as f64 * 0.5;
        (0..p.n_ions).map(|i| profile.z_start + (i as f64 - half) * 3e-6).collect()
    };
    let init = if p.n_ions == 1 {
        TrajectoryState::at_rest(0.0, seed)
    } else {
        TrajectoryState::at_rest(0.0, crystal_modes::equilibrium_positions(&start, p.n_ions, &seed, c)?.positions)
    };
    let drive = WaveformDrive::new(&wf, &t.basis)?;
    let iopts = IntegrationOptions { sample_interval: Some(p.sample_interval_ns * 1e-9), ..Default::default() };
    let traj = if p.n_ions == 1 {
        md::integrate_classical(&drive, &init, wf.duration(), c, &iopts)?
    } else {
        md::integrate_crystal(&drive, &init, wf.duration(), c, &iopts)?
    };
    let fin = drive.final_potential()?;
    let end = traj.final_lab().clone();
    let eq = crystal_modes::equilibrium_positions(&fin, p.n_ions, &end.positions, c)?;
    let spec = crystal_modes::mode_spectrum(&fin, &eq, c)?;
    let alphas = md::extract_mode_alphas(&end, &eq, &spec, c)?;

    let modes: Vec<Value> = alphas
        .iter()
        .map(|a| {
            let mut v = serde_json::to_value(ModeExcitation::from(a)).expect("serialises");
            v["name"] = json!(mode_name(a.mode_index, p.n_ions));
            v
        })
        .collect();
    r.outputs["omega_rad_s"] = json!(omega);
    r.outputs["f_MHz"] = json!(omega / TAU / 1e6);
    r.outputs["duration_s"] = json!(wf.duration());
    r.outputs["modes"] = json!(modes);
    r.outputs["predicted_single_ion"] = json!({
        "re_alpha": predicted.alpha.re, "im_alpha": predicted.alpha.im, "nbar": predicted.nbar()
    });
    if p.n_ions > 1 {
        // the COM of N ions carries N times the single-ion occupation
        r.outputs["predicted_com_nbar"] = json!(predicted.nbar() * p.n_ions as f64);
    }
    r.certificates["spectral_amplitude_m"] = json!(spectral.norm());
    r.certificates["omega_t_T_rad"] = json!(omega * tt);
    r.certificates["max_dac_step_V"] = json!(wf.max_step());

    if p.compensate {
        if p.n_ions != 1 {
            return Err(arg_err("compensation is supported for a single ion"));
        }
        let a = &alphas[0];
        if a.alpha.norm() == 0.0 {
            r.outputs["compensation"] = json!({ "needed": false });
        } else {
            // The pulse is designed for a harmonic well; anharmonicity of the
            // real well leaves a small residual, folded back into the target.
            let mut target = *a;
            let mut history = Vec::new();
            let mut best = None;
            for _ in 0..4 {
                let mut pulse = md::compensation_pulse(&target, a.omega, p.max_e0_v_per_m, p.max_pulse_us * 1e-6, c)?;
                pulse.t_start = wf.duration();
                let pulsed = PulsedDrive { inner: &drive, pulse };
                let opts = IntegrationOptions::default();
                let after = md::integrate_classical(&pulsed, &end, pulse.t_start + pulse.t_e, c, &opts)?;
                let res = md::extract_mode_alphas(after.final_lab(), &eq, &spec, c)?.remove(0);
                history.push(res.nbar());
                let done = res.nbar() < 1e-9;
                best = Some((pulse, res.nbar()));
                if done {
                    break;
                }
                // undo the free rotation over the pulse before correcting
                target.alpha += res.alpha * num_complex::Complex64::from_polar(1.0, a.omega * pulse.t_e);
            }
            let (pulse, residual) = best.expect("at least one pass");
            r.outputs["compensation"] = json!({
                "needed": true,
                "e0_V_per_m": pulse.e0,
                "t_E_s": pulse.t_e,
                "phi_E_rad": pulse.phi_e,
                "residual_nbar": residual,
                "residual_history": history,
            });
        }
    }

    ctx.write_with(&mut r, "waveform.csv", |b| io::write_waveform_csv(b, &wf))?;
    ctx.write_with(&mut r, "trajectory.csv", |b| io::write_trajectory_csv(b, &traj))?;
    let body = pretty(&json!({ "modes": r.outputs["modes"] }));
    ctx.write(&mut r, "excitation.json", &body)?;
    Ok(r)
}

pub fn separate(ctx: &Context_, p: Separate) -> anyhow::Result<RunReport> {
    let t = ctx.trap;
    let c = &t.constants;
    let mut r = ctx.report("separate", &p);
    if p.n_ions == 0 {
        return Err(arg_err("n_ions must be positive"));
    }
    let design = SeparationDesign {
        omega_start: TAU * p.omega_start_mhz * 1e6,
        omega_end: TAU * p.omega_end_mhz * 1e6,
        ..Default::default()
    };
    let opts = SeparationOptions::default();
    let mut ramp = design.build(&t.basis, &opts.synth.bounds, c)?;
    ramp.eps1 = p.eps1;
    ramp.eps2 = p.eps2;
    ramp.o2_offset = p.o2_offset_mv * 1e-3;
    ramp.o2_ramp = p.o2_ramp_v;
    ramp.x_tune = p.x_tune_v;
    ramp.ab_differential = p.ab_differential_v;
    let mut opts = opts;
    opts.adiabatic.displacement_scale = p.displacement_scale_um * 1e-6;
    let res = ws::synth_separation(&t.basis, &ramp, p.n_ions, &opts, c)?;

    let stages: Vec<Value> = res
        .stages
        .iter()
        .map(|s| {
            json!({
                "s_range": [s.s_range.0, s.s_range.1],
                "eps": s.eps,
                "duration_s": s.duration,
                "dac_duration_s": s.dac_duration,
                "certificate": s.certificate,
            })
        })
        .collect();
    r.outputs["duration_s"] = json!(res.waveform.duration());
    r.outputs["samples"] = json!(res.waveform.len());
    r.outputs["stage_boundary_s"] = json!(res.stage_boundary);
    r.outputs["min_frequency_rad_s"] = json!(res.min_frequency);
    r.certificates["stages"] = json!(stages);
    let wedge = t.basis.potential(SeparationPath::new(&t.basis, ramp.clone())?.voltages_at(res.crossing.s))?;
    let q = fit_quartic(&wedge, opts.wedge_center, t.basis.quartic_half_width())?;
    r.certificates["crossing"] = json!({ "s": res.crossing.s, "a_V_per_m2": q.a, "b_V_per_m4": res.crossing.b });

    if p.dynamics && p.n_ions >= 2 {
        let path = SeparationPath::new(&t.basis, ramp.clone())?;
        let start = t.basis.potential(path.voltages_at(0.0))?;
        let half = (p.n_ions - 1) as f64 * 0.5;
        let seed: Vec<f64> = (0..p.n_ions).map(|i| (i as f64 - half) * opts.seed_spacing).collect();
        let eq = crystal_modes::equilibrium_positions(&start, p.n_ions, &seed, c)?;
        let drive = WaveformDrive::new(&res.waveform, &t.basis)?;
        let traj = md::integrate_crystal(
            &drive,
            &TrajectoryState::at_rest(0.0, eq.positions),
            res.waveform.duration(),
            c,
            &IntegrationOptions::default(),
        )?;
        let fin = drive.final_potential()?;
        let alphas = md::extract_local_alphas(traj.final_lab(), &fin, c)?;
        let ions: Vec<Value> = alphas
            .iter()
            .zip(&traj.final_lab().positions)
            .map(|(a, z)| {
                let mut v = serde_json::to_value(ModeExcitation::from(a)).expect("serialises");
                v["z_m"] = json!(z);
                v
            })
            .collect();
        if p.n_ions == 2 {
            r.outputs["nbar_A"] = json!(alphas[0].nbar());
            r.outputs["nbar_B"] = json!(alphas[1].nbar());
        }
        r.outputs["ions"] = json!(ions);
        let body = pretty(&json!({ "ions": r.outputs["ions"] }));
        ctx.write(&mut r, "excitation.json", &body)?;
    }
    ctx.write_with(&mut r, "waveform.csv", |b| io::write_waveform_csv(b, &res.waveform))?;
    Ok(r)
}

pub fn partition_scan(ctx: &Context_, p: Partition) -> anyhow::Result<RunReport> {
    let t = ctx.trap;
    let c = &t.constants;
    let mut r = ctx.report("partition-scan", &p);
    if !(p.offset_step_v > 0.0) || !(p.offset_max_v >= p.offset_min_v) {
        return Err(arg_err("need offset_step_V > 0 and offset_max_V >= offset_min_V"));
    }
    let n = ((p.offset_max_v - p.offset_min_v) / p.offset_step_v + 1e-9).floor() as usize;
    // rounded so that printed offsets do not carry accumulation noise
    let offsets: Vec<f64> =
        (0..=n).map(|k| ((p.offset_min_v + k as f64 * p.offset_step_v) * 1e9).round() / 1e9).collect();
    let ramp = SeparationDesign::default().build(&t.basis, &VoltageBounds::default(), c)?;
    let path = SeparationPath::new(&t.basis, ramp)?;
    let fl = FluorescenceModel { counts_per_ion: p.counts_per_ion, droop: p.droop };
    let scan = crystal_modes::partition_scan(&path, p.n_ions, &offsets, c, &PartitionOptions::default(), &fl)?;
    let monotone = scan.windows(2).all(|w| w[1].left >= w[0].left) || scan.windows(2).all(|w| w[1].left <= w[0].left);
    let mut plateaus: Vec<Value> = Vec::new();
    let mut k = 0;
    while k < scan.len() {
        let mut j = k;
        while j + 1 < scan.len() && scan[j + 1].left == scan[k].left {
            j += 1;
        }
        plateaus.push(json!({
            "left_count": scan[k].left,
            "from_V": scan[k].offset,
            "to_V": scan[j].offset,
            "width_V": scan[j].offset - scan[k].offset + p.offset_step_v,
        }));
        k = j + 1;
    }
    r.outputs["points"] = json!(scan.len());
    r.outputs["plateaus"] = json!(plateaus);
    r.certificates["monotone"] = json!(monotone);
    ctx.write_with(&mut r, "partition.csv", |b| io::write_partition_csv(b, &scan))?;
    Ok(r)
}

pub fn flop(ctx: &Context_, p: Flop) -> anyhow::Result<RunReport> {
    let mut r = ctx.report("flop", &p);
    let model: ModelKind = p.model.parse()?;
    let sideband: Sideband = p.sideband.parse()?;
    let dist = match model {
        ModelKind::Thermal => ms::thermal_dist(p.nbar, None)?,
        ModelKind::Coherent => {
            let a = if p.alpha.is_nan() { p.nbar.max(0.0).sqrt() } else { p.alpha };
            ms::coherent_dist(a, None)?
        }
    };
    if p.n_points < 2 || !(p.t_max_us > 0.0) {
        return Err(arg_err("need n_points >= 2 and t_max_us > 0"));
    }
    let times: Vec<f64> = (0..p.n_points).map(|k| p.t_max_us * 1e-6 * k as f64 / (p.n_points - 1) as f64).collect();
    let omega0 = TAU * p.omega0_khz * 1e3;
    let mut trace = ms::flopping_trace(&dist, sideband, omega0, p.eta, p.gamma_per_s, &times)?;
    let seed = ctx.seed.unwrap_or(0);
    if p.noise_sigma > 0.0 {
        trace = ms::add_noise(&trace, Noise::Gaussian { sigma: p.noise_sigma }, seed)?;
    }
    if p.repetitions > 0 {
        trace = ms::add_noise(&trace, Noise::Binomial { repetitions: p.repetitions }, seed)?;
    }
    r.outputs["distribution_mean"] = json!(dist.mean());
    r.outputs["n_max"] = json!(dist.n_max());
    r.outputs["points"] = json!(trace.times.len());
    r.certificates["population_total"] = json!(dist.total());
    ctx.write_with(&mut r, "trace.csv", |b| io::write_trace_csv(b, &trace))?;
    Ok(r)
}

pub fn fit(ctx: &Context_, p: Fit) -> anyhow::Result<RunReport> {
    let mut r = ctx.report("fit", &p);
    if p.input.as_os_str().is_empty() {
        return Err(arg_err("fit needs --input <trace.csv>"));
    }
    let model: ModelKind = p.model.parse()?;
    let sideband: Sideband = p.sideband.parse()?;
    let omega0 = TAU * p.omega0_khz * 1e3;
    let (times, pd) = io::read_trace_csv(&p.input)?;
    let trace = io::trace_from_columns(times, pd, sideband, p.eta, omega0)?;
    let opts = ms::FitOptions { fit_omega0: p.fit_omega0, ..Default::default() };
    let f = ms::fit_distribution(&trace, model, KnownParams { omega0, eta: p.eta }, &opts)?;
    let rep = io::FitReport::from(&f);
    r.outputs["fit"] = serde_json::to_value(&rep)?;
    r.certificates["iterations"] = json!(f.iterations);
    r.certificates["residual"] = json!(f.residual);
    ctx.write(&mut r, "fit.json", &pretty(&rep))?;
    Ok(r)
}

/// Loads the trap named on the command line, or the built-in default.
pub fn load_trap(path: Option<&PathBuf>) -> anyhow::Result<(Trap, Value)> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Io { path: p.display().to_string(), msg: "trap file not found".into() }.into());
            }
            let trap = io::load_trap(p).with_context(|| format!("loading trap {}", p.display()))?;
            Ok((trap, json!({ "file": p.display().to_string(), "electrodes": trap_names(p)? })))
        }
        None => {
            let file = io::TrapFile::default();
            let trap = file.build(Path::new("."))?;
            let names = trap.basis.names().to_vec();
            Ok((trap, json!({ "file": null, "electrodes": names })))
        }
    }
}

fn trap_names(p: &Path) -> anyhow::Result<Vec<String>> {
    let trap: Trap = io::load_trap(p)?;
    Ok(trap.basis.names().to_vec())
}
