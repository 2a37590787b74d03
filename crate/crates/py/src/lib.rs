//! Python module `tunechat`: world generation, the staged pipeline, policy
//! checkpoints and the reward and advantage primitives.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use tunechat::corpus::MaskedSequence;
use tunechat::pipeline::{Pipeline, PipelineConfig, Stage};
use tunechat::policy::{evaluate_logprob, load_checkpoint, PolicyParams};
use tunechat::rewards::{RewardWeights, RuleRewards};
use tunechat::world::{generate_world, SongId, StateId, UserId, WorldConfig};
use tunechat::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Config(_) | Error::Input(_) | Error::Lookup { .. } | Error::ResumeMismatch(_) | Error::Toml(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (_, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let list = PyList::empty(py);
            for x in a {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(o) => {
            let dict = PyDict::new(py);
            for (k, x) in o {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &value)
}

/// A generated music world.
#[pyclass(name = "World", module = "tunechat")]
struct PyWorld {
    inner: tunechat::world::World,
}

#[pymethods]
impl PyWorld {
    /// `config` is a TOML fragment of world settings; `seed` overrides its seed.
    #[new]
    #[pyo3(signature = (config=None, seed=None))]
    fn new(config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg: WorldConfig = match config {
            Some(text) => toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => WorldConfig::default(),
        };
        if let Some(s) = seed {
            cfg.rng_seed = s;
        }
        Ok(Self {
            inner: generate_world(&cfg).map_err(py_err)?,
        })
    }

    #[getter]
    fn n_songs(&self) -> usize {
        self.inner.songs.len()
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.users.len()
    }

    #[getter]
    fn n_on_platform(&self) -> usize {
        self.inner.on_platform_count()
    }

    fn song<'py>(&self, py: Python<'py>, song_id: u32) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, self.inner.song(SongId(song_id)).map_err(py_err)?)
    }

    /// Ground-truth affinity of a user for a song in a situational state.
    fn oracle_affinity(&self, user_id: u32, song_id: u32, state: u8) -> PyResult<f64> {
        let user = self.inner.user(UserId(user_id)).map_err(py_err)?;
        self.inner
            .oracle_affinity(user, SongId(song_id), StateId(state))
            .map_err(py_err)
    }
}

/// The staged training pipeline over one output directory.
#[pyclass(name = "Pipeline", module = "tunechat")]
struct PyPipeline {
    inner: Pipeline,
}

fn stages(names: &[String]) -> PyResult<Vec<Stage>> {
    names.iter().map(|n| Stage::parse(n).map_err(py_err)).collect()
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config=None, out_dir=None, seed=None))]
    fn new(config: Option<PathBuf>, out_dir: Option<PathBuf>, seed: Option<u64>) -> PyResult<Self> {
        let (mut cfg, mut text) = match &config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| PyFileNotFoundError::new_err(e.to_string()))?;
                (PipelineConfig::from_toml(&text).map_err(py_err)?, Some(text))
            }
            None => (PipelineConfig::default(), None),
        };
        if let Some(s) = seed {
            cfg = cfg.with_seed(s);
            text = None;
        }
        if let Some(dir) = out_dir {
            cfg.out_dir = dir;
            text = None;
        }
        Ok(Self {
            inner: Pipeline::new(cfg, text).map_err(py_err)?,
        })
    }

    /// Names of every stage, in order.
    #[staticmethod]
    fn stage_names() -> Vec<&'static str> {
        Stage::ALL.iter().map(|s| s.name()).collect()
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out.clone()
    }

    fn config_toml(&self) -> String {
        self.inner.config.to_toml()
    }

    /// Run consecutive stages; returns the manifest's output hashes.
    #[pyo3(signature = (names, resume=false))]
    fn run<'py>(&self, py: Python<'py>, names: Vec<String>, resume: bool) -> PyResult<Bound<'py, PyAny>> {
        let list = stages(&names)?;
        let manifest = py.detach(|| self.inner.run(&list, resume)).map_err(py_err)?;
        serialize(py, &manifest.output_hashes())
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        match self.inner.manifest().map_err(py_err)? {
            Some(m) => serialize(py, &m),
            None => Ok(py.None().into_bound(py)),
        }
    }

    /// Offline metrics of a checkpoint on the held-out prompts.
    fn evaluate<'py>(&self, py: Python<'py>, ckpt: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let report = py
            .detach(|| {
                let base = self.inner.load_base()?;
                let params = load_checkpoint(&ckpt)?;
                self.inner.evaluate(&params, &base).map(|(r, _)| r)
            })
            .map_err(py_err)?;
        serialize(py, &report)
    }

    /// One of `pretrain`, `context`, `rewards`, `training-stage`.
    fn ablate<'py>(&self, py: Python<'py>, kind: &str) -> PyResult<Bound<'py, PyAny>> {
        let p = &self.inner;
        let value = py
            .detach(|| -> tunechat::Result<Value> {
                let rows = match kind {
                    "pretrain" => serde_json::to_value(p.ablate_pretrain()?)?,
                    "context" => serde_json::to_value(p.ablate_context()?)?,
                    "rewards" => serde_json::to_value(p.ablate_rewards()?)?,
                    "training-stage" => serde_json::to_value(p.ablate_training_stage()?)?,
                    other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
                };
                Ok(rows)
            })
            .map_err(py_err)?;
        to_py(py, &value)
    }
}

/// A policy checkpoint.
#[pyclass(name = "Policy", module = "tunechat")]
struct PyPolicy {
    inner: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    /// Summed log-probability of the tokens where `mask` is true.
    fn logprob(&self, tokens: Vec<u32>, mask: Vec<bool>) -> PyResult<f64> {
        let seq = MaskedSequence::new(tokens, mask).map_err(py_err)?;
        Ok(evaluate_logprob(&self.inner, &seq).map_err(py_err)?.total)
    }

    /// Greedy continuation of `prefix`, stopping at `eos`.
    fn greedy(&self, prefix: Vec<u32>, max_new: usize, eos: u32) -> PyResult<Vec<u32>> {
        let mut r = tunechat::rng::stream(0, 0);
        self.inner.sample(&prefix, max_new, 0.0, eos, &mut r).map_err(py_err)
    }
}

/// Mean-centered group advantages.
#[pyfunction]
fn group_advantages(rewards: Vec<f64>) -> Vec<f64> {
    tunechat::grpo::group_advantages(&rewards)
}

/// Gated hybrid reward from its components.
#[pyfunction]
#[pyo3(signature = (r_rel, r_pers, r_format, r_fact, r_div, r_dedup, lambda_pers=0.5, lambda_rule=0.25))]
#[allow(clippy::too_many_arguments)]
fn hybrid_reward(
    r_rel: u8,
    r_pers: f64,
    r_format: u8,
    r_fact: f64,
    r_div: f64,
    r_dedup: f64,
    lambda_pers: f64,
    lambda_rule: f64,
) -> PyResult<f64> {
    let weights = RewardWeights {
        lambda_pers,
        lambda_format: lambda_rule,
        lambda_fact: lambda_rule,
        lambda_div: lambda_rule,
        lambda_dedup: lambda_rule,
    };
    let rules = RuleRewards {
        r_format,
        r_fact,
        r_div,
        r_dedup,
        parsed_items: Vec::new(),
    };
    Ok(tunechat::rewards::hybrid_reward(r_rel, r_pers, rules, &weights)
        .map_err(py_err)?
        .r_hyb)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(tunechat::rewards::auc(&scores, &labels))
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("inputs differ in length"));
    }
    Ok(tunechat::rewards::spearman(&a, &b))
}

#[pymodule(name = "tunechat")]
fn tunechat_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWorld>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_reward, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    Ok(())
}
