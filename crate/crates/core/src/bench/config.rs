//! Experiment configuration files.
//!
//! A config is a flat TOML document. Every key is optional except
//! `protocol`, `model`, the dataset keys, `clients` and `rounds`; see the
//! README for the full schema and defaults.

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::data::BlobParams;
use crate::error::{Error, Result};
use crate::federation::{FederationConfig, Partitioning, ProtocolKind};
use crate::model::{Activation, Loss, ModelKind, ModelSpec};
use crate::optim::{Hyper, ScalingFn};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv {
        train: PathBuf,
        test: Option<PathBuf>,
        dim: usize,
        classes: usize,
    },
    Blobs {
        params: BlobParams,
        /// Samples per class in the held-out set; 0 evaluates on train.
        test_per_class: usize,
        /// Generator seed; defaults to the run seed.
        seed: Option<u64>,
    },
}

impl DataSource {
    pub fn dim(&self) -> usize {
        match self {
            DataSource::Csv { dim, .. } => *dim,
            DataSource::Blobs { params, .. } => params.dim,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DataSource::Csv { classes, .. } => *classes,
            DataSource::Blobs { params, .. } => params.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub protocol: ProtocolKind,
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
    pub data: DataSource,
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_global: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub momentum: f64,
    pub lazy_period: usize,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub scaling: ScalingFn,
    pub partitioning: Partitioning,
    pub reshard_each_round: bool,
    pub seed: u64,
    pub repeat: usize,
    pub workers: usize,
    pub target_accuracy: f64,
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.model,
            input: self.data.dim(),
            hidden: self.hidden.clone(),
            classes: self.data.classes(),
            activation: self.activation,
            loss: self.loss,
        }
    }

    pub fn federation(&self, seed: u64) -> FederationConfig {
        FederationConfig {
            protocol: self.protocol,
            model: self.model_spec(),
            clients: self.clients,
            participation: self.participation,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            hyper: Hyper {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                weight_decay: self.weight_decay,
                epsilon: self.epsilon,
            },
            lr_global: self.lr_global,
            momentum: self.momentum,
            scaling: self.scaling,
            milestones: self.milestones.clone(),
            lr_decay: self.lr_decay,
            lazy_period: Some(self.lazy_period),
            partitioning: self.partitioning,
            reshard_each_round: self.reshard_each_round,
            seed,
            workers: self.workers,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.with_context(path.display().to_string()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        let mut f = Fields(table);

        let protocol = f.string("protocol")?.ok_or_else(|| missing("protocol"))?;
        let protocol: ProtocolKind = protocol.parse().map_err(|e| Error::config("protocol", e))?;
        let model = match f.string("model")?.ok_or_else(|| missing("model"))?.as_str() {
            "mlp" => ModelKind::Mlp,
            "logistic" => ModelKind::Logistic,
            "linear-regression" => ModelKind::LinearRegression,
            other => return Err(Error::config("model", format!("unknown model `{other}`"))),
        };
        let hidden = f.usize_list("hidden")?.unwrap_or_default();
        let activation = match f.string("activation")?.as_deref() {
            None | Some("relu") => Activation::Relu,
            Some("tanh") => Activation::Tanh,
            Some(other) => {
                return Err(Error::config(
                    "activation",
                    format!("unknown activation `{other}`"),
                ))
            }
        };
        let loss = match f.string("loss")?.as_deref() {
            None if model == ModelKind::LinearRegression => Loss::Mse,
            None | Some("cross-entropy") => Loss::CrossEntropy,
            Some("mse") => Loss::Mse,
            Some(other) => return Err(Error::config("loss", format!("unknown loss `{other}`"))),
        };

        let data = parse_data(&mut f)?;

        let partitioning = match (f.bool("iid")?, f.usize("classes_per_client")?) {
            (Some(true), Some(_)) => {
                return Err(Error::config(
                    "classes_per_client",
                    "conflicts with iid = true",
                ))
            }
            (Some(false), None) => {
                return Err(Error::config("iid", "iid = false needs classes_per_client"))
            }
            (_, Some(c)) => Partitioning::LabelShards { per_client: c },
            (_, None) => Partitioning::Iid,
        };

        let scaling = match f.string("scaling")?.as_deref() {
            None | Some("identity") => ScalingFn::Identity,
            Some("clipped") => {
                let min = f.f64("phi_min")?.ok_or_else(|| missing("phi_min"))?;
                let max = f.f64("phi_max")?.ok_or_else(|| missing("phi_max"))?;
                ScalingFn::clipped(min, max).map_err(|e| Error::config("phi_min", e.to_string()))?
            }
            Some(other) => {
                return Err(Error::config(
                    "scaling",
                    format!("unknown scaling `{other}`"),
                ))
            }
        };

        let defaults = Hyper::default();
        let cfg = ExperimentConfig {
            protocol,
            model,
            hidden,
            activation,
            loss,
            data,
            partitioning,
            scaling,
            clients: f.usize("clients")?.ok_or_else(|| missing("clients"))?,
            participation: f.f64("participation")?.unwrap_or(1.0),
            rounds: f.usize("rounds")?.ok_or_else(|| missing("rounds"))?,
            local_epochs: f.usize("local_epochs")?.unwrap_or(1),
            batch_size: f.usize("batch_size")?.unwrap_or(128),
            lr: f.f64("lr")?.unwrap_or(defaults.lr),
            lr_global: f.f64("lr_global")?.unwrap_or(0.01),
            beta1: f.f64("beta1")?.unwrap_or(defaults.beta1),
            beta2: f.f64("beta2")?.unwrap_or(defaults.beta2),
            weight_decay: f.f64("weight_decay")?.unwrap_or(defaults.weight_decay),
            epsilon: f.f64("epsilon")?.unwrap_or(defaults.epsilon),
            momentum: f.f64("momentum")?.unwrap_or(0.0),
            lazy_period: f.usize("lazy_period")?.unwrap_or(1),
            milestones: f.usize_list("milestones")?.unwrap_or_default(),
            lr_decay: f.f64("lr_decay")?.unwrap_or(0.1),
            reshard_each_round: f.bool("reshard_each_round")?.unwrap_or(false),
            seed: f.u64("seed")?.unwrap_or(0),
            repeat: f.usize("repeat")?.unwrap_or(1),
            workers: f.usize("workers")?.unwrap_or(0),
            target_accuracy: f.f64("target_accuracy")?.unwrap_or(0.9),
            output: f
                .string("output")?
                .unwrap_or_else(|| "metrics.csv".into())
                .into(),
        };
        f.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clients", self.clients),
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
            ("lazy_period", self.lazy_period),
            ("repeat", self.repeat),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation", "must lie in (0, 1]"));
        }
        let checks = [
            ("lr", self.lr > 0.0),
            ("lr_global", self.lr_global > 0.0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("weight_decay", (0.0..=1.0).contains(&self.weight_decay)),
            ("epsilon", self.epsilon > 0.0),
            ("momentum", (0.0..1.0).contains(&self.momentum)),
            ("lr_decay", self.lr_decay > 0.0),
            (
                "target_accuracy",
                (0.0..=1.0).contains(&self.target_accuracy),
            ),
            (
                "milestones",
                self.milestones.windows(2).all(|w| w[0] < w[1]),
            ),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::config(key, "value out of range"));
            }
        }
        if let Partitioning::LabelShards { per_client: 0 } = self.partitioning {
            return Err(Error::config("classes_per_client", "must be at least 1"));
        }
        self.model_spec()
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))
    }

    /// Full TOML rendering; `parse(to_toml())` reproduces the record.
    pub fn to_toml(&self) -> String {
        let mut t = Table::new();
        let mut put = |k: &str, v: Value| {
            t.insert(k.to_string(), v);
        };
        let int = |v: usize| Value::Integer(v as i64);
        let list =
            |v: &[usize]| Value::Array(v.iter().map(|&x| Value::Integer(x as i64)).collect());
        put("protocol", Value::String(self.protocol.name().into()));
        put(
            "model",
            Value::String(
                match self.model {
                    ModelKind::Mlp => "mlp",
                    ModelKind::Logistic => "logistic",
                    ModelKind::LinearRegression => "linear-regression",
                }
                .into(),
            ),
        );
        put("hidden", list(&self.hidden));
        put(
            "activation",
            Value::String(match self.activation {
                Activation::Relu => "relu".into(),
                Activation::Tanh => "tanh".into(),
            }),
        );
        put(
            "loss",
            Value::String(match self.loss {
                Loss::Mse => "mse".into(),
                Loss::CrossEntropy => "cross-entropy".into(),
            }),
        );
        match &self.data {
            DataSource::Csv {
                train,
                test,
                dim,
                classes,
            } => {
                put("csv", Value::String(train.display().to_string()));
                if let Some(test) = test {
                    put("csv_test", Value::String(test.display().to_string()));
                }
                put("csv_dim", int(*dim));
                put("csv_classes", int(*classes));
            }
            DataSource::Blobs {
                params,
                test_per_class,
                seed,
            } => {
                put("blob_classes", int(params.classes));
                put("blob_dim", int(params.dim));
                put("blob_per_class", int(params.per_class));
                put("blob_test_per_class", int(*test_per_class));
                put("blob_separation", Value::Float(params.separation));
                put("blob_noise", Value::Float(params.noise));
                if let Some(s) = seed {
                    put("blob_seed", Value::Integer(*s as i64));
                }
            }
        }
        match self.partitioning {
            Partitioning::Iid => put("iid", Value::Boolean(true)),
            Partitioning::LabelShards { per_client } => put("classes_per_client", int(per_client)),
        }
        match self.scaling {
            ScalingFn::Identity => put("scaling", Value::String("identity".into())),
            ScalingFn::Clipped { min, max } => {
                put("scaling", Value::String("clipped".into()));
                put("phi_min", Value::Float(min));
                put("phi_max", Value::Float(max));
            }
        }
        put("clients", int(self.clients));
        put("participation", Value::Float(self.participation));
        put("rounds", int(self.rounds));
        put("local_epochs", int(self.local_epochs));
        put("batch_size", int(self.batch_size));
        put("lr", Value::Float(self.lr));
        put("lr_global", Value::Float(self.lr_global));
        put("beta1", Value::Float(self.beta1));
        put("beta2", Value::Float(self.beta2));
        put("weight_decay", Value::Float(self.weight_decay));
        put("epsilon", Value::Float(self.epsilon));
        put("momentum", Value::Float(self.momentum));
        put("lazy_period", int(self.lazy_period));
        put("milestones", list(&self.milestones));
        put("lr_decay", Value::Float(self.lr_decay));
        put(
            "reshard_each_round",
            Value::Boolean(self.reshard_each_round),
        );
        put("seed", Value::Integer(self.seed as i64));
        put("repeat", int(self.repeat));
        put("workers", int(self.workers));
        put("target_accuracy", Value::Float(self.target_accuracy));
        put("output", Value::String(self.output.display().to_string()));
        toml::to_string(&t).expect("flat table serializes")
    }
}

fn missing(key: &str) -> Error {
    Error::config(key, "required key is missing")
}

fn parse_data(f: &mut Fields) -> Result<DataSource> {
    let csv = f.string("csv")?;
    let blob_keys = f.0.keys().any(|k| k.starts_with("blob_"));
    match (csv, blob_keys) {
        (Some(_), true) => Err(Error::config(
            "csv",
            "give either csv or blob_* keys, not both",
        )),
        (None, false) => Err(Error::config(
            "csv",
            "no dataset: set csv or the blob_* keys",
        )),
        (Some(train), false) => Ok(DataSource::Csv {
            train: train.into(),
            test: f.string("csv_test")?.map(PathBuf::from),
            dim: f.usize("csv_dim")?.ok_or_else(|| missing("csv_dim"))?,
            classes: f
                .usize("csv_classes")?
                .ok_or_else(|| missing("csv_classes"))?,
        }),
        (None, true) => Ok(DataSource::Blobs {
            params: BlobParams {
                classes: f
                    .usize("blob_classes")?
                    .ok_or_else(|| missing("blob_classes"))?,
                dim: f.usize("blob_dim")?.ok_or_else(|| missing("blob_dim"))?,
                per_class: f
                    .usize("blob_per_class")?
                    .ok_or_else(|| missing("blob_per_class"))?,
                separation: f.f64("blob_separation")?.unwrap_or(6.0),
                noise: f.f64("blob_noise")?.unwrap_or(1.0),
            },
            test_per_class: f.usize("blob_test_per_class")?.unwrap_or(0),
            seed: f.u64("blob_seed")?,
        }),
    }
}

/// Typed accessors that consume keys, so leftovers are unknown keys.
struct Fields(Table);

impl Fields {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.0.remove(key)
    }

    fn mismatch(key: &str, expected: &str, got: &Value) -> Error {
        Error::config(
            key,
            format!("expected {expected}, found {}", got.type_str()),
        )
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(Self::mismatch(key, "a string", &v)),
        }
    }

    fn bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(b)),
            Some(v) => Err(Self::mismatch(key, "a boolean", &v)),
        }
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Float(x)) => Ok(Some(x)),
            Some(Value::Integer(i)) => Ok(Some(i as f64)),
            Some(v) => Err(Self::mismatch(key, "a number", &v)),
        }
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if i >= 0 => Ok(Some(i as u64)),
            Some(v) => Err(Self::mismatch(key, "a non-negative integer", &v)),
        }
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    fn usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::Integer(i) if i >= 0 => Ok(i as usize),
                    other => Err(Self::mismatch(
                        key,
                        "a list of non-negative integers",
                        &other,
                    )),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Err(Self::mismatch(key, "a list", &v)),
        }
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(key) => Err(Error::config(key.clone(), "unknown key")),
            None => Ok(()),
        }
    }
}
