use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dtg_core::datamodel::{DataPaths, Schema};
use dtg_core::evaluation::EvalConfig;
use dtg_core::nbm::{GenerateOptions, GenerationMode};
use dtg_core::networks::{NetConfig, WScale};
use dtg_core::synth::{Censoring, OuSpec, TteSpec};
use dtg_core::training::{LossWeights, TrainConfig, WeightDecay};

use crate::CliError;

/// Every tunable of a run, as one flat JSON object.
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub schema: Option<PathBuf>,
    pub longitudinal: Option<PathBuf>,
    pub context: Option<PathBuf>,
    pub tte: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Evaluate this sample file instead of generating.
    pub samples_file: Option<PathBuf>,

    pub n_hidden: usize,
    pub imputer_embed_dim: usize,
    pub flow_depth: usize,
    pub corrector_layers: usize,
    pub wnet_layers: usize,
    pub pnet_layers: usize,
    pub tte_residual_layers: usize,
    pub w_scale: WScale,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gibbs_steps: usize,
    pub validation_fraction: f64,
    pub weight_imputer: f64,
    pub weight_rbm: f64,
    pub weight_mse: f64,
    pub weight_consistency: f64,
    pub weight_event: f64,
    pub decay_imputer: f64,
    pub decay_flow: f64,
    pub decay_corrector: f64,
    pub decay_wnet: f64,
    pub decay_pnet: f64,
    pub decay_tte: f64,

    pub times: Vec<f64>,
    pub samples: usize,
    pub mode: GenerationMode,

    pub bin_width: f64,
    pub horizon: Option<f64>,
    pub cohort: String,
    pub folds: usize,
    pub fold: Option<usize>,

    pub synth_patients: usize,
    pub ou_theta: Vec<f64>,
    pub ou_sigma: Vec<f64>,
    pub ou_mean_offset: Vec<f64>,
    pub ou_mean_coef: Vec<Vec<f64>>,
    pub ou_n_context: usize,
    pub ou_correlation: Vec<Vec<f64>>,
    pub ou_schedules: Vec<Vec<f64>>,
    pub ou_missing_rate: f64,
    /// Presence enables a synthetic event outcome.
    pub tte_intercept: Option<f64>,
    pub tte_coef: Vec<f64>,
    pub tte_kappa: f64,
    pub tte_censoring: Censoring,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let train = TrainConfig::default();
        let weights = LossWeights::default();
        let decay = WeightDecay::default();
        let ou = OuSpec::univariate(1.0, 2f64.sqrt(), 1, vec![0.0, 1.0, 2.0, 4.0, 8.0], 0.1);
        let eval = EvalConfig::default();
        Self {
            seed: None,
            out: PathBuf::from("out"),
            schema: None,
            longitudinal: None,
            context: None,
            tte: None,
            model: None,
            samples_file: None,
            n_hidden: net.n_hidden,
            imputer_embed_dim: net.imputer_embed_dim,
            flow_depth: net.flow_depth,
            corrector_layers: net.corrector_layers,
            wnet_layers: net.wnet_layers,
            pnet_layers: net.pnet_layers,
            tte_residual_layers: net.tte_residual_layers,
            w_scale: net.w_scale,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            gibbs_steps: train.gibbs_steps,
            validation_fraction: train.validation_fraction,
            weight_imputer: weights.imputer,
            weight_rbm: weights.rbm,
            weight_mse: weights.mse,
            weight_consistency: weights.consistency,
            weight_event: weights.event,
            decay_imputer: decay.imputer,
            decay_flow: decay.flow,
            decay_corrector: decay.corrector,
            decay_wnet: decay.wnet,
            decay_pnet: decay.pnet,
            decay_tte: decay.tte,
            times: vec![1.0, 3.0, 6.0, 12.0],
            samples: 100,
            mode: GenerationMode::default(),
            bin_width: eval.bin_width,
            horizon: eval.horizon,
            cohort: eval.cohort,
            folds: 5,
            fold: None,
            synth_patients: 2000,
            ou_theta: ou.theta,
            ou_sigma: ou.sigma,
            ou_mean_offset: ou.mean_offset,
            ou_mean_coef: ou.mean_coef,
            ou_n_context: ou.n_context,
            ou_correlation: ou.correlation,
            ou_schedules: ou.schedules,
            ou_missing_rate: ou.missing_rate,
            tte_intercept: None,
            tte_coef: vec![1.0, 0.0],
            tte_kappa: 2.0,
            tte_censoring: Censoring::None,
        }
    }
}

impl RunConfig {
    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out);
        for p in [
            &mut cfg.schema,
            &mut cfg.longitudinal,
            &mut cfg.context,
            &mut cfg.tte,
            &mut cfg.model,
            &mut cfg.samples_file,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| {
            CliError::Config("a seed is required (config key `seed` or --seed)".into())
        })
    }

    /// Fails unless `path` is set and exists.
    pub fn existing<'a>(&self, key: &str, path: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
        let p = path
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("`{key}` is required for this command")))?;
        if !p.exists() {
            return Err(CliError::Config(format!(
                "`{key}` does not exist: {}",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn load_schema(&self) -> Result<Schema, CliError> {
        let path = self.existing("schema", &self.schema)?;
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let schema: Schema = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn data_paths(&self) -> Result<DataPaths, CliError> {
        let longitudinal = self
            .existing("longitudinal", &self.longitudinal)?
            .to_path_buf();
        let context = match &self.context {
            Some(_) => Some(self.existing("context", &self.context)?.to_path_buf()),
            None => None,
        };
        let tte = match &self.tte {
            Some(_) => Some(self.existing("tte", &self.tte)?.to_path_buf()),
            None => None,
        };
        Ok(DataPaths {
            longitudinal,
            context,
            tte,
        })
    }

    pub fn net_config(&self, schema: &Schema) -> NetConfig {
        NetConfig {
            n_obs: schema.n_obs(),
            n_hidden: self.n_hidden,
            n_context: schema.n_context(),
            imputer_embed_dim: self.imputer_embed_dim,
            flow_depth: self.flow_depth,
            corrector_layers: self.corrector_layers,
            wnet_layers: self.wnet_layers,
            pnet_layers: self.pnet_layers,
            tte_residual_layers: self.tte_residual_layers,
            n_events: schema.tte_outcomes.len(),
            w_scale: self.w_scale,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            gibbs_steps: self.gibbs_steps,
            seed: self.seed()?,
            validation_fraction: self.validation_fraction,
            weights: LossWeights {
                imputer: self.weight_imputer,
                rbm: self.weight_rbm,
                mse: self.weight_mse,
                consistency: self.weight_consistency,
                event: self.weight_event,
            },
            weight_decay: WeightDecay {
                imputer: self.decay_imputer,
                flow: self.decay_flow,
                corrector: self.decay_corrector,
                wnet: self.decay_wnet,
                pnet: self.decay_pnet,
                tte: self.decay_tte,
            },
        })
    }

    pub fn generate_options(&self) -> Result<GenerateOptions, CliError> {
        Ok(GenerateOptions {
            times: self.times.clone(),
            n_samples: self.samples,
            gibbs_steps: self.gibbs_steps,
            mode: self.mode,
            seed: self.seed()?,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            bin_width: self.bin_width,
            horizon: self.horizon,
            cohort: self.cohort.clone(),
        }
    }

    pub fn ou_spec(&self) -> OuSpec {
        OuSpec {
            theta: self.ou_theta.clone(),
            sigma: self.ou_sigma.clone(),
            mean_offset: self.ou_mean_offset.clone(),
            mean_coef: self.ou_mean_coef.clone(),
            n_context: self.ou_n_context,
            correlation: self.ou_correlation.clone(),
            schedules: self.ou_schedules.clone(),
            missing_rate: self.ou_missing_rate,
        }
    }

    pub fn tte_spec(&self) -> Option<TteSpec> {
        self.tte_intercept.map(|intercept| TteSpec {
            intercept,
            coef: self.tte_coef.clone(),
            kappa: self.tte_kappa,
            censoring: self.tte_censoring,
        })
    }

    /// Writes the resolved config beside the outputs.
    pub fn echo(&self, command: &str) -> Result<(), CliError> {
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Data(format!("{}: {e}", self.out.display())))?;
        let path = self.out.join(format!("{command}.config.json"));
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
