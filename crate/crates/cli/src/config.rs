//! Flat-key run configuration: method defaults, then the config file, then
//! command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use s2t_saliency::saliency::{ExplainConfig, ImpactKind, Method};
use s2t_saliency::segmentation::{ASR_TAU_S, FIXED_K, ST_TAU_S};

use crate::manifest::Task;
use crate::CliError;

/// Every key is optional; unset keys keep the method's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatConfig {
    pub method: Option<Method>,
    pub n_spec_iters: Option<usize>,
    pub n_tok_iters: Option<usize>,
    pub p_spec: Option<f64>,
    pub p_tok: Option<f64>,
    pub rng_seed: Option<u64>,
    pub phis: Option<Vec<f64>>,
    /// Duration cap for the patch count; unset picks it from each entry's task.
    pub tau_s: Option<f64>,
    pub compactness: Option<f64>,
    pub n_iters: Option<usize>,
    pub sigma: Option<f64>,
    pub fixed_k: Option<Vec<usize>>,
    pub bubbles_per_s: Option<f64>,
    pub width_s: Option<f64>,
    pub height_mels: Option<f64>,
    pub impact: Option<ImpactKind>,
    pub workers: Option<usize>,
}

/// Ablation switches that rewrite the segmentation or impact settings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    /// A single scale at 500 patches per second.
    pub no_multiscale: bool,
    /// Heavy pre-smoothing, which pushes SLIC towards a regular grid.
    pub grid: bool,
    /// Fixed patch counts regardless of duration.
    pub no_duration_adaptation: bool,
}

impl FlatConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Keys set in `other` win.
    pub fn overlay(mut self, other: &FlatConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f.clone(); } )* };
        }
        take!(
            method, n_spec_iters, n_tok_iters, p_spec, p_tok, rng_seed, phis, tau_s, compactness, n_iters,
            sigma, fixed_k, bubbles_per_s, width_s, height_mels, impact, workers
        );
        self
    }

    pub fn apply_ablations(mut self, a: Ablations) -> Self {
        if a.no_multiscale {
            self.phis = Some(vec![500.0]);
        }
        if a.grid {
            self.sigma = Some(10.0);
        }
        if a.no_duration_adaptation {
            self.fixed_k = Some(if a.no_multiscale { vec![FIXED_K[1]] } else { FIXED_K.to_vec() });
        }
        self
    }

    /// Fully resolved settings; every key but `tau_s` ends up set.
    pub fn resolve(&self) -> Result<ResolvedConfig, CliError> {
        let method = self.method.unwrap_or_default();
        let mut cfg = ExplainConfig::for_method(method);
        let p = &mut cfg.perturbation;
        macro_rules! set {
            ($dst:expr, $src:ident) => { if let Some(v) = &self.$src { $dst = v.clone(); } };
        }
        set!(p.n_spec_iters, n_spec_iters);
        set!(p.n_tok_iters, n_tok_iters);
        set!(p.p_spec, p_spec);
        set!(p.p_tok, p_tok);
        set!(p.rng_seed, rng_seed);
        let s = &mut cfg.segmentation;
        set!(s.phis, phis);
        set!(s.compactness, compactness);
        set!(s.n_iters, n_iters);
        set!(s.sigma, sigma);
        if self.fixed_k.is_some() {
            s.fixed_k = self.fixed_k.clone();
        }
        let b = &mut cfg.bubble;
        set!(b.bubbles_per_s, bubbles_per_s);
        set!(b.width_s, width_s);
        set!(b.height_mels, height_mels);
        set!(cfg.impact, impact);
        set!(cfg.workers, workers);
        if let Some(t) = self.tau_s {
            cfg.segmentation.tau_s = t;
        }
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(cfg.bubble.bubbles_per_s > 0.0 && cfg.bubble.width_s > 0.0 && cfg.bubble.height_mels > 0.0) {
            return Err(CliError::Config("bubble geometry must be positive".into()));
        }
        Ok(ResolvedConfig {
            explain: cfg,
            tau_s: self.tau_s,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    explain: ExplainConfig,
    tau_s: Option<f64>,
}

impl ResolvedConfig {
    pub fn method(&self) -> Method {
        self.explain.method
    }

    pub fn seed(&self) -> u64 {
        self.explain.perturbation.rng_seed
    }

    /// Settings for one utterance of the given task.
    pub fn for_task(&self, task: Task) -> ExplainConfig {
        let mut cfg = self.explain.clone();
        cfg.segmentation.tau_s = self.tau_s.unwrap_or(match task {
            Task::Asr => ASR_TAU_S,
            Task::St => ST_TAU_S,
        });
        cfg
    }

    /// The flat form with every resolved value written out. Loading it back
    /// reproduces this configuration.
    pub fn echo(&self) -> FlatConfig {
        let c = &self.explain;
        FlatConfig {
            method: Some(c.method),
            n_spec_iters: Some(c.perturbation.n_spec_iters),
            n_tok_iters: Some(c.perturbation.n_tok_iters),
            p_spec: Some(c.perturbation.p_spec),
            p_tok: Some(c.perturbation.p_tok),
            rng_seed: Some(c.perturbation.rng_seed),
            phis: Some(c.segmentation.phis.clone()),
            tau_s: self.tau_s,
            compactness: Some(c.segmentation.compactness),
            n_iters: Some(c.segmentation.n_iters),
            sigma: Some(c.segmentation.sigma),
            fixed_k: c.segmentation.fixed_k.clone(),
            bubbles_per_s: Some(c.bubble.bubbles_per_s),
            width_s: Some(c.bubble.width_s),
            height_mels: Some(c.bubble.height_mels),
            impact: Some(c.impact),
            workers: Some(c.workers),
        }
    }

    pub fn echo_json(&self) -> String {
        serde_json::to_string_pretty(&self.echo()).expect("config serializes") + "\n"
    }
}
