//! Closed-form parameter counts for the flow and for a WaveGlow-style
//! baseline with global conditioning, so that model sizes can be compared
//! without building either network.

use super::config::FlowConfig;
use crate::predictor::KernelPredictor;

/// One line of a parameter breakdown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCount {
    pub module: String,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub name: String,
    pub total: usize,
    pub modules: Vec<ModuleCount>,
}

impl ParamReport {
    fn new(name: &str, modules: Vec<ModuleCount>) -> Self {
        Self {
            name: name.to_string(),
            total: modules.iter().map(|m| m.params).sum(),
            modules,
        }
    }

    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }

    pub fn get(&self, module: &str) -> Option<usize> {
        self.modules
            .iter()
            .find(|m| m.module == module)
            .map(|m| m.params)
    }
}

fn entry(module: &str, params: usize) -> ModuleCount {
    ModuleCount {
        module: module.to_string(),
        params,
    }
}

/// Trainable scalars of a [`FlowConfig`] model, broken down by module type
/// (summed over flow steps).
pub fn count_parameters(name: &str, cfg: &FlowConfig) -> ParamReport {
    let h = cfg.kp.hidden_ch;
    let mels = cfg.stft.num_mels;
    let targets = cfg.kernel_targets();
    let n = cfg.n_flows;
    let kp_entry = h * mels * 2 + h;
    let kp_residual = cfg.kp.residual_blocks * 2 * (h * h * cfg.kp.kp_kernel_size + h + 2 * h);
    let kp_total = KernelPredictor::<f64>::param_count(&cfg.kp, mels, &targets);
    let kp_output = kp_total - kp_entry - kp_residual;
    let schedule = cfg.channel_schedule();
    let mixing: usize = schedule.iter().map(|c| c * c).sum();
    let in_proj: usize = schedule
        .iter()
        .map(|c| c.div_ceil(2) * cfg.lvc_channels + cfg.lvc_channels)
        .sum();
    let out_proj: usize = schedule
        .iter()
        .map(|c| 2 * (c / 2) * (cfg.lvc_channels + 1))
        .sum();
    ParamReport::new(
        name,
        vec![
            entry("mixing", mixing),
            entry("predictor.entry", n * kp_entry),
            entry("predictor.residual", n * kp_residual),
            entry("predictor.output", n * kp_output),
            entry("coupling.in_proj", in_proj),
            entry("coupling.out_proj", out_proj),
        ],
    )
}

/// Shape of a WaveGlow-style flow: the same squeeze/early-output schedule,
/// but each coupling is a WaveNet-like stack of globally shared dilated
/// convolutions conditioned on a transposed-convolution upsampling of the
/// mel spectrogram. Weight-normalised layers carry one extra gain per
/// output channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WaveGlowConfig {
    pub n_flows: usize,
    pub n_group: usize,
    pub n_early_every: usize,
    pub n_early_size: usize,
    pub wn_layers: usize,
    pub wn_channels: usize,
    pub wn_kernel_size: usize,
    pub num_mels: usize,
    pub upsample_kernel: usize,
}

impl WaveGlowConfig {
    pub fn with_channels(wn_channels: usize) -> Self {
        Self {
            n_flows: 12,
            n_group: 8,
            n_early_every: 4,
            n_early_size: 2,
            wn_layers: 8,
            wn_channels,
            wn_kernel_size: 3,
            num_mels: 80,
            upsample_kernel: 1024,
        }
    }

    /// `waveglow-<channels>`.
    pub fn preset(name: &str) -> Option<Self> {
        let c: usize = name.strip_prefix("waveglow-")?.parse().ok()?;
        (c > 0).then(|| Self::with_channels(c))
    }
}

pub fn waveglow_preset_names() -> &'static [&'static str] {
    &[
        "waveglow-64",
        "waveglow-128",
        "waveglow-256",
        "waveglow-512",
    ]
}

/// Trainable scalars of a WaveGlow-style baseline.
pub fn count_waveglow_parameters(name: &str, cfg: &WaveGlowConfig) -> ParamReport {
    let m = cfg.num_mels;
    let c = cfg.wn_channels;
    let l = cfg.wn_layers;
    let k = cfg.wn_kernel_size;
    let cond_in = m * cfg.n_group;
    let upsample = m * m * cfg.upsample_kernel + m;

    let mut mixing = 0;
    let mut start = 0;
    let mut layers = 0;
    let mut cond = 0;
    let mut end = 0;
    let mut remaining = cfg.n_group;
    for f in 0..cfg.n_flows {
        if f > 0 && f % cfg.n_early_every == 0 {
            remaining -= cfg.n_early_size;
        }
        let half = remaining / 2;
        mixing += remaining * remaining;
        // weight-normalised 1x1 conv: weight + bias + gain
        start += half * c + 2 * c;
        // dilated gated convs (2C outputs) and residual/skip convs
        let in_layers = l * (c * 2 * c * k + 2 * 2 * c);
        let res_skip = (l - 1) * (2 * c * c + 2 * 2 * c) + (c * c + 2 * c);
        layers += in_layers + res_skip;
        cond += cond_in * 2 * c * l + 2 * 2 * c * l;
        end += c * 2 * half + 2 * half;
    }
    ParamReport::new(
        name,
        vec![
            entry("upsample", upsample),
            entry("mixing", mixing),
            entry("wn.start", start),
            entry("wn.layers", layers),
            entry("wn.cond", cond),
            entry("wn.end", end),
        ],
    )
}

/// Parameter report for any named preset (flow or baseline).
pub fn count_preset(name: &str) -> Option<ParamReport> {
    if let Some(cfg) = FlowConfig::preset(name) {
        return Some(count_parameters(name, &cfg));
    }
    WaveGlowConfig::preset(name).map(|cfg| count_waveglow_parameters(name, &cfg))
}
