//! File formats: trap definitions (JSON), sample tables, waveforms,
//! trajectories, flopping traces and partition scans (CSV), excitation and
//! fit reports (JSON).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::constants::{PhysicalConstants, BE9_MASS_U};
use crate::crystal_modes::ScanPoint;
use crate::error::{Error, Result};
use crate::measurement_sim::{FitResult, FloppingTrace, ModelKind, Sideband};
use crate::motion_dynamics::{CoherentAmplitude, Trajectory};
use crate::scalar::Real;
use crate::spline::CubicSpline;
use crate::trap_model::{BasisFn, ElectrodeBasis, DEFAULT_SPACING, DEFAULT_WIDTH};
use crate::waveform_synth::VoltageWaveform;

/// Version written to and required in trap files.
pub const TRAP_SCHEMA_VERSION: u32 = 1;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io { path: path.display().to_string(), msg: e.to_string() }
}

/// Trap definition file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapFile {
    pub schema_version: u32,
    #[serde(default = "default_mass_u")]
    pub ion_mass_u: f64,
    pub basis: BasisSpec,
    /// Axial domain, required for per-electrode bases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_m: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quartic_half_width_m: Option<f64>,
}

fn default_mass_u() -> f64 {
    BE9_MASS_U
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisSpec {
    /// Five Gaussian electrodes O1, A, X, B, O2 on a regular pitch.
    Gaussian { spacing_m: f64, width_m: f64 },
    /// Explicit electrode list.
    Electrodes { electrodes: Vec<ElectrodeSpec> },
}

/// One electrode: either a Gaussian (`center_m`, `width_m`) or a sample
/// table CSV (`table`, relative to the trap file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElectrodeSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
}

impl Default for TrapFile {
    fn default() -> Self {
        Self {
            schema_version: TRAP_SCHEMA_VERSION,
            ion_mass_u: BE9_MASS_U,
            basis: BasisSpec::Gaussian { spacing_m: DEFAULT_SPACING, width_m: DEFAULT_WIDTH },
            domain_m: None,
            quartic_half_width_m: None,
        }
    }
}

/// A trap ready for use.
#[derive(Debug, Clone)]
pub struct Trap<T> {
    pub basis: ElectrodeBasis<T>,
    pub constants: PhysicalConstants<T>,
}

impl TrapFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: TrapFile =
            serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
        if t.schema_version != TRAP_SCHEMA_VERSION {
            return Err(Error::Argument(format!(
                "unsupported trap schema_version {}, expected {TRAP_SCHEMA_VERSION}",
                t.schema_version
            )));
        }
        Ok(t)
    }

    /// Builds the basis; sample tables resolve against `base_dir`.
    pub fn build<T: Real>(&self, base_dir: &Path) -> Result<Trap<T>> {
        if !(self.ion_mass_u > 0.0 && self.ion_mass_u.is_finite()) {
            return Err(Error::Argument("ion_mass_u must be positive".into()));
        }
        let constants = PhysicalConstants::with_mass_u(T::lit(self.ion_mass_u));
        constants.validate()?;
        let mut basis = match &self.basis {
            BasisSpec::Gaussian { spacing_m, width_m } => {
                if self.domain_m.is_some() {
                    return Err(Error::Argument("domain_m is implied by the gaussian basis".into()));
                }
                if !(*spacing_m > 0.0 && *width_m > 0.0) {
                    return Err(Error::Argument("spacing_m and width_m must be positive".into()));
                }
                ElectrodeBasis::gaussian(T::lit(*spacing_m), T::lit(*width_m))?
            }
            BasisSpec::Electrodes { electrodes } => {
                let [lo, hi] =
                    self.domain_m.ok_or_else(|| Error::Argument("domain_m is required for an electrode list".into()))?;
                let mut names = Vec::with_capacity(electrodes.len());
                let mut fns = Vec::with_capacity(electrodes.len());
                for e in electrodes {
                    if names.contains(&e.name) {
                        return Err(Error::Argument(format!("duplicate electrode name {}", e.name)));
                    }
                    let f = match (e.center_m, e.width_m, &e.table) {
                        (Some(c), Some(w), None) => BasisFn::Gaussian { center: T::lit(c), width: T::lit(w) },
                        (None, None, Some(p)) => {
                            let path = base_dir.join(p);
                            let (z, phi) = read_samples_csv(&path)?;
                            BasisFn::Tabulated(CubicSpline::new(z, phi)?)
                        }
                        _ => {
                            return Err(Error::Argument(format!(
                                "electrode {}: give either center_m and width_m, or table",
                                e.name
                            )))
                        }
                    };
                    names.push(e.name.clone());
                    fns.push(f);
                }
                ElectrodeBasis::new(names, fns, (T::lit(lo), T::lit(hi)))?
            }
        };
        if let Some(hw) = self.quartic_half_width_m {
            if !(hw > 0.0) {
                return Err(Error::Argument("quartic_half_width_m must be positive".into()));
            }
            basis = basis.with_quartic_half_width(T::lit(hw));
        }
        Ok(Trap { basis, constants })
    }
}

/// Reads and builds a trap definition.
pub fn load_trap<T: Real>(path: &Path) -> Result<Trap<T>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file = TrapFile::from_json(&text).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse { line, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })?;
    file.build(path.parent().unwrap_or(Path::new(".")))
}

/// Parsed numeric CSV: header plus rows, with the 1-based file line of each row.
struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<f64>)>,
}

fn read_table<R: Read>(src: R, what: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(src);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: format!("{what}: {e}") })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Parse { line: 1, msg: format!("{what}: missing header") });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse { line, msg: format!("{what}: {e}") }
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("{what}: expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let vals = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line, msg: format!("{what}: '{f}' is not a finite number") })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, vals));
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 2, msg: format!("{what}: no data rows") });
    }
    Ok(Table { header, rows })
}

fn expect_header(t: &Table, want: &[&str], what: &str) -> Result<()> {
    if t.header.iter().map(String::as_str).ne(want.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{what}: header must be '{}', found '{}'", want.join(","), t.header.join(",")),
        });
    }
    Ok(())
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| io_err(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse { line, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

/// Reads a `z_m,phi_V` sample table with strictly increasing z.
pub fn read_samples_csv<T: Real>(path: &Path) -> Result<(Vec<T>, Vec<T>)> {
    with_path(path, parse_samples(open(path)?))
}

pub fn parse_samples<T: Real, R: Read>(src: R) -> Result<(Vec<T>, Vec<T>)> {
    let t = read_table(src, "sample table")?;
    expect_header(&t, &["z_m", "phi_V"], "sample table")?;
    let mut z = Vec::with_capacity(t.rows.len());
    let mut phi = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        if let Some(prev) = z.last() {
            if !(T::lit(r[0]) > *prev) {
                return Err(Error::Parse { line: *line, msg: "z_m must increase strictly".into() });
            }
        }
        z.push(T::lit(r[0]));
        phi.push(T::lit(r[1]));
    }
    Ok((z, phi))
}

pub fn write_samples_csv<W: Write>(out: W, z: &[f64], phi: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let e = |e: csv::Error| Error::Io { path: "sample table".into(), msg: e.to_string() };
    w.write_record(["z_m", "phi_V"]).map_err(e)?;
    for (a, b) in z.iter().zip(phi) {
        w.write_record([a.to_string(), b.to_string()]).map_err(e)?;
    }
    w.flush().map_err(|x| Error::Io { path: "sample table".into(), msg: x.to_string() })
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(out)
}

fn wr(what: &str) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io { path: what.to_string(), msg: e.to_string() }
}

fn flush<W: Write>(mut w: csv::Writer<W>, what: &str) -> Result<()> {
    w.flush().map_err(|e| Error::Io { path: what.to_string(), msg: e.to_string() })
}

/// `t_s,V_<name>...`, one row per DAC sample.
pub fn write_waveform_csv<T: Real, W: Write>(out: W, wf: &VoltageWaveform<T>) -> Result<()> {
    let mut w = csv_writer(out);
    let mut header = vec!["t_s".to_string()];
    header.extend(wf.names().iter().map(|n| format!("V_{n}")));
    w.write_record(&header).map_err(wr("waveform"))?;
    for (k, v) in wf.samples().iter().enumerate() {
        let mut row = vec![wf.time(k).as_f64().to_string()];
        row.extend(v.iter().map(|x| x.as_f64().to_string()));
        w.write_record(&row).map_err(wr("waveform"))?;
    }
    flush(w, "waveform")
}

pub fn read_waveform_csv<T: Real>(path: &Path) -> Result<VoltageWaveform<T>> {
    with_path(path, parse_waveform(open(path)?))
}

/// Parses a waveform table; sample times must be uniform from t = 0.
pub fn parse_waveform<T: Real, R: Read>(src: R) -> Result<VoltageWaveform<T>> {
    let t = read_table(src, "waveform")?;
    if t.header.first().map(String::as_str) != Some("t_s") || t.header.len() < 2 {
        return Err(Error::Parse { line: 1, msg: "waveform: header must be 't_s,V_<name>,...'".into() });
    }
    let names = t.header[1..]
        .iter()
        .map(|h| {
            h.strip_prefix("V_")
                .filter(|n| !n.is_empty())
                .map(str::to_string)
                .ok_or_else(|| Error::Parse { line: 1, msg: format!("waveform: column '{h}' must be V_<name>") })
        })
        .collect::<Result<Vec<_>>>()?;
    if t.rows.len() < 2 {
        return Err(Error::Parse { line: 2, msg: "waveform: at least two samples required".into() });
    }
    let t0 = t.rows[0].1[0];
    if t0 != 0.0 {
        return Err(Error::Parse { line: t.rows[0].0, msg: "waveform: first sample must be at t = 0".into() });
    }
    let dt = t.rows[1].1[0] - t0;
    if !(dt > 0.0) {
        return Err(Error::Parse { line: t.rows[1].0, msg: "waveform: times must increase".into() });
    }
    for (k, (line, r)) in t.rows.iter().enumerate() {
        let expect = dt * k as f64;
        if (r[0] - expect).abs() > 1e-6 * dt {
            return Err(Error::Parse { line: *line, msg: format!("waveform: sample time {} is off the {dt} s grid", r[0]) });
        }
    }
    let samples = t.rows.iter().map(|(_, r)| r[1..].iter().map(|v| T::lit(*v)).collect()).collect();
    VoltageWaveform::new(names, T::lit(dt), samples)
}

/// `t_s,z1_m,...,v1_mps,...` in the lab frame.
pub fn write_trajectory_csv<T: Real, W: Write>(out: W, traj: &Trajectory<T>) -> Result<()> {
    let n = traj.samples.first().map(|s| s.positions.len()).unwrap_or(0);
    let mut w = csv_writer(out);
    let mut header = vec!["t_s".to_string()];
    header.extend((1..=n).map(|i| format!("z{i}_m")));
    header.extend((1..=n).map(|i| format!("v{i}_mps")));
    w.write_record(&header).map_err(wr("trajectory"))?;
    for s in &traj.samples {
        let mut row = vec![s.t.as_f64().to_string()];
        row.extend(s.positions.iter().chain(&s.velocities).map(|x| x.as_f64().to_string()));
        w.write_record(&row).map_err(wr("trajectory"))?;
    }
    flush(w, "trajectory")
}

/// `t_s,p_down`.
pub fn write_trace_csv<T: Real, W: Write>(out: W, trace: &FloppingTrace<T>) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["t_s", "p_down"]).map_err(wr("trace"))?;
    for (t, p) in trace.times.iter().zip(&trace.p_down) {
        w.write_record([t.as_f64().to_string(), p.as_f64().to_string()]).map_err(wr("trace"))?;
    }
    flush(w, "trace")
}

/// Times and probabilities from a trace table.
pub fn read_trace_csv<T: Real>(path: &Path) -> Result<(Vec<T>, Vec<T>)> {
    with_path(path, parse_trace(open(path)?))
}

pub fn parse_trace<T: Real, R: Read>(src: R) -> Result<(Vec<T>, Vec<T>)> {
    let t = read_table(src, "trace")?;
    expect_header(&t, &["t_s", "p_down"], "trace")?;
    let mut times: Vec<T> = Vec::with_capacity(t.rows.len());
    let mut p = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        if let Some(prev) = times.last() {
            if !(T::lit(r[0]) > *prev) {
                return Err(Error::Parse { line: *line, msg: "trace: t_s must increase strictly".into() });
            }
        }
        if !(0.0..=1.0).contains(&r[1]) {
            return Err(Error::Parse { line: *line, msg: format!("trace: p_down {} outside [0, 1]", r[1]) });
        }
        times.push(T::lit(r[0]));
        p.push(T::lit(r[1]));
    }
    Ok((times, p))
}

/// `offset_V,left_count,counts`.
pub fn write_partition_csv<T: Real, W: Write>(out: W, scan: &[ScanPoint<T>]) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["offset_V", "left_count", "counts"]).map_err(wr("partition scan"))?;
    for p in scan {
        w.write_record([p.offset.as_f64().to_string(), p.left.to_string(), p.counts.as_f64().to_string()])
            .map_err(wr("partition scan"))?;
    }
    flush(w, "partition scan")
}

/// Per-mode entry of an excitation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeExcitation {
    pub mode: usize,
    pub omega: f64,
    pub re_alpha: f64,
    pub im_alpha: f64,
    pub nbar: f64,
}

impl<T: Real> From<&CoherentAmplitude<T>> for ModeExcitation {
    fn from(a: &CoherentAmplitude<T>) -> Self {
        Self {
            mode: a.mode_index,
            omega: a.omega.as_f64(),
            re_alpha: a.alpha.re.as_f64(),
            im_alpha: a.alpha.im.as_f64(),
            nbar: a.nbar().as_f64(),
        }
    }
}

/// Fit report as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ModelKind,
    pub nbar: f64,
    pub nbar_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha_sigma: Option<f64>,
    pub gamma: f64,
    pub omega0: f64,
    pub residual: f64,
}

impl<T: Real> From<&FitResult<T>> for FitReport {
    fn from(f: &FitResult<T>) -> Self {
        Self {
            model: f.model,
            nbar: f.nbar.as_f64(),
            nbar_sigma: f.nbar_sigma.map(|v| v.as_f64()),
            alpha: f.alpha.map(|v| v.as_f64()),
            alpha_sigma: f.alpha_sigma.map(|v| v.as_f64()),
            gamma: f.gamma.as_f64(),
            omega0: f.omega0.as_f64(),
            residual: f.residual.as_f64(),
        }
    }
}

/// Assembles a trace from imported columns plus the measurement settings.
pub fn trace_from_columns<T: Real>(
    times: Vec<T>,
    p_down: Vec<T>,
    sideband: Sideband,
    eta: T,
    omega0: T,
) -> Result<FloppingTrace<T>> {
    let tr = FloppingTrace { times, p_down, sideband, eta, omega0, gamma: T::zero() };
    tr.validate()?;
    Ok(tr)
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_parse_errors_carry_lines() {
        let text = "t_s,p_down\n0,1\n1e-6,0.9\n2e-6,abc\n";
        match parse_trace::<f64, _>(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_trace::<f64, _>("".as_bytes()), Err(Error::Parse { .. })));
        assert!(matches!(parse_trace::<f64, _>("t_s,p_down\n".as_bytes()), Err(Error::Parse { .. })));
        match parse_trace::<f64, _>("t_s,p_down\n0,1\n1,2\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trap_file_rejects_unknown_keys() {
        let ok = r#"{"schema_version":1,"basis":{"type":"gaussian","spacing_m":185e-6,"width_m":1e-4}}"#;
        let t = TrapFile::from_json(ok).unwrap();
        assert_eq!(t, TrapFile::default());
        let typo = r#"{"schema_version":1,"bases":{"type":"gaussian","spacing_m":185e-6,"width_m":1e-4}}"#;
        assert!(TrapFile::from_json(typo).is_err());
        let v2 = r#"{"schema_version":2,"basis":{"type":"gaussian","spacing_m":185e-6,"width_m":1e-4}}"#;
        assert!(matches!(TrapFile::from_json(v2), Err(Error::Argument(_))));
    }

    #[test]
    fn waveform_round_trip() {
        let wf = VoltageWaveform::new(
            vec!["A".into(), "B".into()],
            20e-9,
            vec![vec![0.1, -0.2], vec![0.15, -0.25], vec![0.3, 1.0 / 3.0]],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_waveform_csv(&mut buf, &wf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("t_s,V_A,V_B\n"));
        let back: VoltageWaveform<f64> = parse_waveform(buf.as_slice()).unwrap();
        assert_eq!(back.samples(), wf.samples());
        assert_eq!(back.names(), wf.names());
    }
}
