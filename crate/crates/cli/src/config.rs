//! Run configuration: an optional TOML file merged under command-line flags.

use std::path::Path;

use clap::{Args, ValueEnum};
use conceptmil::{KMeansConfig, PipelineConfig, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Library defaults: K = 10, d_h 512, d_a 128, 20 epochs, lr 1e-3.
    Default,
    /// Ten planted concepts in 32 dimensions, 60 slides per class.
    Acceptance,
    /// Four planted concepts in 8 dimensions, 12 slides per class.
    Small,
}

/// Every tunable shared by the subcommands. Absent values fall back to the
/// preset.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Parameter preset [default: default]
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Base seed for every random stream [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of concepts K
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Cross-validation folds
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    /// MIL hidden width
    #[arg(long = "d-h", global = true)]
    pub d_h: Option<usize>,
    /// MIL attention width
    #[arg(long = "d-a", global = true)]
    pub d_a: Option<usize>,
    /// MIL SGD learning rate
    #[arg(long = "lr", global = true)]
    pub learning_rate: Option<f64>,
    /// MIL training epochs
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Half-width of the uniform MIL initialization
    #[arg(long, global = true)]
    pub init_scale: Option<f64>,
    /// Relative WCSS decrease at which Lloyd stops
    #[arg(long, global = true)]
    pub kmeans_tol: Option<f64>,
    /// Lloyd iteration cap
    #[arg(long, global = true)]
    pub kmeans_max_iter: Option<usize>,
    /// k-means seedings compared during initialization
    #[arg(long, global = true)]
    pub kmeans_restarts: Option<usize>,
    /// Share of tiles kept in high-attention maps [default: 0.1]
    #[arg(long, global = true)]
    pub top_fraction: Option<f64>,
    /// Bootstrap resamples for class-averaged intervals [default: 1000]
    #[arg(long, global = true)]
    pub bootstrap_reps: Option<usize>,
    /// Pixel size of one grid cell in rendered maps [default: 4]
    #[arg(long, global = true)]
    pub cell: Option<usize>,
    /// Worker threads; results do not depend on it [default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let echo: Echo = toml::from_str(&body)
            .map_err(|e| format!("{}: {}", path.display(), e.message()))?;
        Ok(echo.config)
    }

    /// Values set in `flags` replace those in `self`.
    pub fn overlay(mut self, flags: &RunConfig) -> Self {
        overlay!(
            self, flags, preset, seed, k, folds, d_h, d_a, learning_rate, epochs, init_scale,
            kmeans_tol, kmeans_max_iter, kmeans_restarts, top_fraction, bootstrap_reps, cell,
            threads
        );
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn preset(&self) -> Preset {
        self.preset.unwrap_or(Preset::Default)
    }

    pub fn top_fraction(&self) -> f64 {
        self.top_fraction.unwrap_or(0.10)
    }

    pub fn bootstrap_reps(&self) -> usize {
        self.bootstrap_reps.unwrap_or(1000)
    }

    pub fn cell(&self) -> usize {
        self.cell.unwrap_or(4)
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        match self.preset() {
            Preset::Small => SyntheticSpec::small(self.seed()),
            Preset::Default | Preset::Acceptance => SyntheticSpec::acceptance(self.seed()),
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let seed = self.seed();
        let mut c = match self.preset() {
            Preset::Default => PipelineConfig {
                fold_seed: seed,
                train: TrainConfig {
                    seed,
                    ..TrainConfig::default()
                },
                kmeans: KMeansConfig {
                    seed,
                    ..KMeansConfig::default()
                },
                ..PipelineConfig::default()
            },
            Preset::Acceptance => PipelineConfig::acceptance(seed),
            Preset::Small => PipelineConfig::quick(seed),
        };
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.folds {
            c.folds = v;
        }
        if let Some(v) = self.d_h {
            c.train.d_h = v;
        }
        if let Some(v) = self.d_a {
            c.train.d_a = v;
        }
        if let Some(v) = self.learning_rate {
            c.train.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.init_scale {
            c.train.init_scale = v;
        }
        if let Some(v) = self.kmeans_tol {
            c.kmeans.tol = v;
        }
        if let Some(v) = self.kmeans_max_iter {
            c.kmeans.max_iter = v;
        }
        if let Some(v) = self.kmeans_restarts {
            c.kmeans.restarts = v;
        }
        c
    }

    /// Every field filled in with the value actually used.
    pub fn resolved(&self) -> Self {
        let p = self.pipeline();
        Self {
            preset: Some(self.preset()),
            seed: Some(self.seed()),
            k: Some(p.k),
            folds: Some(p.folds),
            d_h: Some(p.train.d_h),
            d_a: Some(p.train.d_a),
            learning_rate: Some(p.train.learning_rate),
            epochs: Some(p.train.epochs),
            init_scale: Some(p.train.init_scale),
            kmeans_tol: Some(p.kmeans.tol),
            kmeans_max_iter: Some(p.kmeans.max_iter),
            kmeans_restarts: Some(p.kmeans.restarts),
            top_fraction: Some(self.top_fraction()),
            bootstrap_reps: Some(self.bootstrap_reps()),
            cell: Some(self.cell()),
            threads: self.threads,
        }
    }
}

/// Contents of `run_config.toml`; loadable again with `--config`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Echo {
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(flatten)]
    pub config: RunConfig,
}

pub fn echo_string(args: &[String], config: &RunConfig) -> String {
    let echo = Echo {
        command: args.to_vec(),
        config: config.resolved(),
    };
    toml::to_string(&echo).expect("run config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let file = RunConfig {
            k: Some(6),
            epochs: Some(3),
            ..RunConfig::default()
        };
        let flags = RunConfig {
            k: Some(8),
            ..RunConfig::default()
        };
        let merged = file.overlay(&flags);
        assert_eq!(merged.k, Some(8));
        assert_eq!(merged.epochs, Some(3));
        assert_eq!(merged.pipeline().k, 8);
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig {
            preset: Some(Preset::Small),
            seed: Some(3),
            ..RunConfig::default()
        };
        let body = echo_string(&["synth".into()], &c);
        let back: Echo = toml::from_str(&body).unwrap();
        assert_eq!(back.config, c.resolved());
        assert_eq!(back.config.resolved().pipeline(), c.pipeline());
    }
}
