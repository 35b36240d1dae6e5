//! Command parameters. Each set can come from flags or from a JSON config
//! file; flags win. Key names carry their units.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Declares a parameter set twice: as optional flags/keys, and resolved
/// with defaults applied.
macro_rules! params {
    (
        $(#[$meta:meta])*
        $name:ident => $resolved:ident {
            $( $(#[$fmeta:meta])* $field:ident [$key:literal] : $ty:ty = $default:expr ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, PartialEq, clap::Args, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(
                $(#[$fmeta])*
                #[arg(long = $key)]
                #[serde(rename = $key, default, skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        #[derive(Debug, Clone, PartialEq, Serialize)]
        pub struct $resolved {
            $( #[serde(rename = $key)] pub $field: $ty, )*
        }

        impl $name {
            /// Fields set here take precedence over `base`.
            pub fn over(self, base: Option<Self>) -> Self {
                let base = base.unwrap_or_default();
                Self { $( $field: self.$field.or(base.$field), )* }
            }

            pub fn resolve(self) -> $resolved {
                $resolved { $( $field: self.$field.unwrap_or_else(|| $default), )* }
            }
        }
    };
}

params! {
    /// Find a well in given voltages, or solve voltages for a target well.
    SolveWellArgs => SolveWell {
        /// Well position (solve) or search seed (find).
        z0_um ["z0_um"]: f64 = -185.0,
        /// Target frequency; when given, voltages are solved for it.
        omega_mhz ["omega_MHz"]: f64 = f64::NAN,
        /// Electrode voltages (find) or reference voltages (solve).
        #[arg(value_delimiter = ',', allow_negative_numbers = true)]
        voltages_v ["voltages_V"]: Vec<f64> = vec![1.289, 0.327, 2.173, 0.310, 1.311],
        v_limit_v ["v_limit_V"]: f64 = 10.0,
    }
}

params! {
    /// Constant-curvature transport between two positions.
    TransportArgs => Transport {
        /// constant_velocity, sine_squared or min_jerk.
        profile ["profile"]: String = "sine_squared".into(),
        t_t_us ["t_T_us"]: f64 = 8.0,
        omega_mhz ["omega_MHz"]: f64 = 2.0,
        z_start_um ["z_start_um"]: f64 = -185.0,
        z_end_um ["z_end_um"]: f64 = 185.0,
        /// Snap ω to the nearest zero of the profile's spectrum.
        #[arg(num_args = 0..=1, default_missing_value = "true")]
        tune ["tune"]: bool = false,
        /// Extra ω·t_T phase added after tuning, rad.
        #[arg(allow_negative_numbers = true)]
        detune_rad ["detune_rad"]: f64 = 0.0,
        n_ions ["n_ions"]: usize = 1,
        /// Append a field pulse cancelling the final displacement.
        #[arg(num_args = 0..=1, default_missing_value = "true")]
        compensate ["compensate"]: bool = false,
        max_e0_v_per_m ["max_E0_V_per_m"]: f64 = 10.0,
        max_pulse_us ["max_pulse_us"]: f64 = 20.0,
        sample_interval_ns ["sample_interval_ns"]: f64 = 20.0,
        #[arg(value_delimiter = ',', allow_negative_numbers = true)]
        v_ref_v ["v_ref_V"]: Vec<f64> = vec![1.289, 0.327, 2.173, 0.310, 1.311],
    }
}

params! {
    /// Two-stage separation of a crystal into two wells.
    SeparateArgs => Separate {
        eps1 ["eps1"]: f64 = 0.025,
        eps2 ["eps2"]: f64 = 0.015,
        n_ions ["n_ions"]: usize = 2,
        omega_start_mhz ["omega_start_MHz"]: f64 = 2.6,
        omega_end_mhz ["omega_end_MHz"]: f64 = 2.8,
        /// Static offset on O2, held along the whole path.
        #[arg(allow_negative_numbers = true)]
        o2_offset_mv ["o2_offset_mV"]: f64 = 0.0,
        #[arg(allow_negative_numbers = true)]
        o2_ramp_v ["o2_ramp_V"]: f64 = 0.0,
        #[arg(allow_negative_numbers = true)]
        x_tune_v ["x_tune_V"]: f64 = 0.0,
        #[arg(allow_negative_numbers = true)]
        ab_differential_v ["ab_differential_V"]: f64 = 0.0,
        displacement_scale_um ["displacement_scale_um"]: f64 = 10.0,
        /// Integrate the ion motion through the waveform.
        #[arg(num_args = 0..=1, default_missing_value = "true")]
        dynamics ["dynamics"]: bool = true,
    }
}

params! {
    /// Crystal partitioning against a static O2 offset.
    PartitionArgs => Partition {
        n_ions ["n_ions"]: usize = 9,
        #[arg(allow_negative_numbers = true)]
        offset_min_v ["offset_min_V"]: f64 = -0.6,
        #[arg(allow_negative_numbers = true)]
        offset_max_v ["offset_max_V"]: f64 = 0.6,
        offset_step_v ["offset_step_V"]: f64 = 0.01,
        counts_per_ion ["counts_per_ion"]: f64 = 10.0,
        droop ["droop"]: f64 = 0.03,
    }
}

params! {
    /// Simulated sideband flopping trace.
    FlopArgs => Flop {
        /// thermal or coherent.
        model ["model"]: String = "thermal".into(),
        nbar ["nbar"]: f64 = 0.19,
        /// |α| for coherent states; defaults to √n̄.
        alpha ["alpha"]: f64 = f64::NAN,
        sideband ["sideband"]: String = "MAS".into(),
        eta ["eta"]: f64 = 0.479,
        /// Carrier Rabi frequency Ω₀/2π.
        omega0_khz ["omega0_kHz"]: f64 = 100.0,
        gamma_per_s ["gamma_per_s"]: f64 = 5000.0,
        t_max_us ["t_max_us"]: f64 = 50.0,
        n_points ["n_points"]: usize = 101,
        /// Gaussian noise σ (0 disables).
        noise_sigma ["noise_sigma"]: f64 = 0.0,
        /// Binomial shots per point (0 disables).
        repetitions ["repetitions"]: u64 = 0,
    }
}

params! {
    /// Fit a population model to a trace CSV.
    FitArgs => Fit {
        /// Trace CSV with header t_s,p_down.
        input ["input"]: PathBuf = PathBuf::new(),
        model ["model"]: String = "thermal".into(),
        sideband ["sideband"]: String = "MAS".into(),
        eta ["eta"]: f64 = 0.479,
        omega0_khz ["omega0_kHz"]: f64 = 100.0,
        #[arg(num_args = 0..=1, default_missing_value = "true")]
        fit_omega0 ["fit_omega0"]: bool = false,
    }
}

/// Experiment config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub trap: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub solve_well: Option<SolveWellArgs>,
    pub transport: Option<TransportArgs>,
    pub separate: Option<SeparateArgs>,
    pub partition_scan: Option<PartitionArgs>,
    pub flop: Option<FlopArgs>,
    pub fit: Option<FitArgs>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| iontrap::Error::Parse { line: e.line(), msg: format!("{}: {e}", path.display()) })?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            bail!(iontrap::Error::Argument(format!(
                "{}: unsupported schema_version {}, expected {CONFIG_SCHEMA_VERSION}",
                path.display(),
                cfg.schema_version
            )));
        }
        // relative paths in the file are relative to the file
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.trap, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if let Some(fit) = cfg.fit.as_mut() {
            if let Some(p) = fit.input.as_mut() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }
}
