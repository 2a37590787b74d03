//! Stage orchestration with hashed artifacts, a manifest and resume.
//!
//! Every stage reads its inputs from the output directory and writes its
//! outputs back there, so any stage can be rerun on its own once its
//! upstream artifacts exist.

pub mod ablate;
pub mod artifacts;
pub mod config;
pub mod plots;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{EvalConfig, PipelineConfig, PretrainConfig, SplitConfig, OUT_ENV};

use self::artifacts::*;
use crate::corpus::{build_all, CorpusStage, StageKind};
use crate::error::{Error, Result};
use crate::eval::{
    distinct_artists, eval_u2i_ppl, evaluate_policy, knowledge_probes, rm_oracle_gap, DecodedList, MetricsReport,
};
use crate::grpo::{rl_train, RlLogRecord};
use crate::policy::{load_checkpoint, pretrain, save_checkpoint, ModelConfig, PolicyParams};
use crate::rewards::{interactions_from, PersonalizationRM, ScoringContext};
use crate::uq2i::{build_query_index, histories_by_user, sft, synthesize_dataset, QueryIndex, Split, UserSplit};
use crate::vocab::Vocabulary;
use crate::world::{generate_world, Trajectory, UserId, World};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Worldgen,
    Corpus,
    Pretrain,
    Uq2i,
    Sft,
    Rl,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Worldgen,
        Stage::Corpus,
        Stage::Pretrain,
        Stage::Uq2i,
        Stage::Sft,
        Stage::Rl,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Worldgen => "worldgen",
            Stage::Corpus => "corpus",
            Stage::Pretrain => "pretrain",
            Stage::Uq2i => "uq2i",
            Stage::Sft => "sft",
            Stage::Rl => "rl",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    /// Files this stage reads, each with the stage that writes it.
    pub fn inputs(self) -> &'static [(&'static str, Stage)] {
        use Stage::*;
        const WORLD: (&str, Stage) = ("world.jsonl", Worldgen);
        const TRAJ: (&str, Stage) = ("trajectories.jsonl", Worldgen);
        const SPLIT: (&str, Stage) = ("split.json", Worldgen);
        match self {
            Worldgen => &[],
            Corpus => &[WORLD, TRAJ, SPLIT],
            Pretrain => &[
                WORLD,
                ("corpus_stage1.jsonl", Corpus),
                ("corpus_stage2.jsonl", Corpus),
                ("corpus_stage3.jsonl", Corpus),
            ],
            Uq2i => &[WORLD, TRAJ, SPLIT],
            Sft => &[WORLD, ("pretrain.ckpt", Pretrain), ("uq2i_sft.jsonl", Uq2i)],
            Rl => &[
                WORLD,
                SPLIT,
                ("rm.json", Uq2i),
                ("sft.ckpt", Sft),
                ("uq2i_rl.jsonl", Uq2i),
            ],
            Eval => &[
                WORLD,
                TRAJ,
                SPLIT,
                ("rm.json", Uq2i),
                ("rl.ckpt", Rl),
                ("uq2i_eval.jsonl", Uq2i),
            ],
        }
    }
}

/// Check that `stages` is a nonempty run of consecutive pipeline stages.
pub fn validate_chain(stages: &[Stage]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Config("no stages requested".into()));
    }
    let ok = stages.windows(2).all(|w| w[1] as usize == w[0] as usize + 1);
    if !ok {
        let names: Vec<&str> = stages.iter().map(|s| s.name()).collect();
        return Err(Error::Config(format!(
            "stages must be consecutive and in pipeline order, got {names:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: u64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_fingerprint: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entry(&self, stage: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.stage == stage)
    }

    /// Insert or replace the entry for `e.stage`, keeping stage order stable.
    pub fn upsert(&mut self, e: ManifestEntry) {
        match self.entries.iter_mut().find(|x| x.stage == e.stage) {
            Some(slot) => *slot = e,
            None => self.entries.push(e),
        }
    }

    /// Output hashes of every entry, keyed by file name.
    pub fn output_hashes(&self) -> BTreeMap<String, String> {
        self.entries.iter().flat_map(|e| e.outputs.clone()).collect()
    }
}

/// A pipeline bound to a config and an output directory.
pub struct Pipeline {
    pub config: PipelineConfig,
    /// Config text stored verbatim next to the outputs.
    pub config_text: String,
    pub out: PathBuf,
}

/// Artifacts every stage past worldgen needs.
pub struct Base {
    pub world: World,
    pub vocab: Vocabulary,
}

impl Pipeline {
    /// Bind `config` to its resolved output directory. `config_text` is the
    /// file the config came from, if any.
    pub fn new(config: PipelineConfig, config_text: Option<String>) -> Result<Self> {
        config.validate()?;
        let out = config.resolved_out_dir();
        let config_text = config_text.unwrap_or_else(|| config.to_toml());
        Ok(Self {
            config,
            config_text,
            out,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = PipelineConfig::from_toml(&text)?;
        Self::new(config, Some(text))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn manifest(&self) -> Result<Option<Manifest>> {
        let p = self.path(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        read_json(&p).map(Some)
    }

    fn save_manifest(&self, m: &Manifest) -> Result<()> {
        write_json(&self.path(MANIFEST), m)
    }

    /// Manifest for this config, refusing one written under another config.
    /// A fresh run (`fresh`) instead discards the old outputs.
    fn open_manifest(&self, fresh: bool) -> Result<Manifest> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let fp = self.config.fingerprint();
        if let Some(old) = self.manifest()? {
            if old.config_fingerprint == fp {
                return Ok(old);
            }
            if !fresh {
                return Err(Error::ResumeMismatch(format!(
                    "{} was written by config {} but the current config hashes to {fp}",
                    self.out.display(),
                    old.config_fingerprint
                )));
            }
            for name in old.entries.iter().flat_map(|e| e.outputs.keys()) {
                let p = self.path(name);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        let mut m = Manifest {
            config_fingerprint: fp,
            entries: Vec::new(),
        };
        let cfg_path = self.path(CONFIG_FILE);
        fs::write(&cfg_path, &self.config_text).map_err(|e| Error::io(&cfg_path, e))?;
        m.upsert(ManifestEntry {
            stage: "config".into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::from([(CONFIG_FILE.to_string(), sha256_file(&cfg_path)?)]),
            seed: self.config.seed,
            wall_time_s: 0.0,
        });
        self.save_manifest(&m)?;
        Ok(m)
    }

    /// Hash the named files, failing with the producing stage if one is absent.
    pub fn hash_inputs(&self, inputs: &[(&str, Stage)]) -> Result<BTreeMap<String, String>> {
        inputs
            .iter()
            .map(|&(name, producer)| {
                let p = self.path(name);
                if !p.exists() {
                    return Err(Error::MissingArtifact {
                        stage: producer.name().into(),
                        path: p,
                    });
                }
                Ok((name.to_string(), sha256_file(&p)?))
            })
            .collect()
    }

    fn hash_outputs(&self, names: &[String]) -> Result<BTreeMap<String, String>> {
        names
            .iter()
            .map(|n| Ok((n.clone(), sha256_file(&self.path(n))?)))
            .collect()
    }

    /// True if `entry` still describes the files on disk given `inputs`.
    fn up_to_date(&self, entry: &ManifestEntry, inputs: &BTreeMap<String, String>) -> Result<bool> {
        if &entry.inputs != inputs {
            return Ok(false);
        }
        for (name, h) in &entry.outputs {
            let p = self.path(name);
            if !p.exists() || &sha256_file(&p)? != h {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Run `stages` in order. With `resume`, stages whose recorded inputs and
    /// outputs still match the files on disk are skipped.
    pub fn run(&self, stages: &[Stage], resume: bool) -> Result<Manifest> {
        validate_chain(stages)?;
        let fresh = !resume && stages[0] == Stage::Worldgen;
        let mut m = self.open_manifest(fresh)?;
        for &stage in stages {
            let inputs = self.hash_inputs(stage.inputs())?;
            if resume {
                if let Some(e) = m.entry(stage.name()) {
                    if self.up_to_date(e, &inputs)? {
                        continue;
                    }
                }
            }
            let t = Instant::now();
            let outputs = self.run_stage(stage)?;
            let entry = ManifestEntry {
                stage: stage.name().into(),
                inputs,
                outputs: self.hash_outputs(&outputs)?,
                seed: self.config.seed,
                wall_time_s: t.elapsed().as_secs_f64(),
            };
            m.upsert(entry);
            self.save_manifest(&m)?;
        }
        Ok(m)
    }

    /// Record an auxiliary step (an ablation or an ad-hoc evaluation) that
    /// read `inputs` and wrote `outputs` into the output directory.
    pub fn record(&self, name: &str, inputs: &[(&str, Stage)], outputs: &[String], started: Instant) -> Result<()> {
        let mut m = self.open_manifest(false)?;
        let entry = ManifestEntry {
            stage: name.into(),
            inputs: self.hash_inputs(inputs)?,
            outputs: self.hash_outputs(outputs)?,
            seed: self.config.seed,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        m.upsert(entry);
        self.save_manifest(&m)
    }

    fn run_stage(&self, stage: Stage) -> Result<Vec<String>> {
        match stage {
            Stage::Worldgen => self.worldgen(),
            Stage::Corpus => self.corpus(),
            Stage::Pretrain => self.pretrain(),
            Stage::Uq2i => self.uq2i(),
            Stage::Sft => self.sft(),
            Stage::Rl => self.rl(),
            Stage::Eval => self.eval(),
        }
    }

    fn require(&self, name: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                stage: producer.name().into(),
                path: p,
            })
        }
    }

    pub fn load_base(&self) -> Result<Base> {
        let world = read_world(&self.require("world.jsonl", Stage::Worldgen)?)?;
        let vocab = Vocabulary::for_world(&world);
        Ok(Base { world, vocab })
    }

    pub fn load_trajectories(&self) -> Result<Vec<Trajectory>> {
        read_jsonl(&self.require("trajectories.jsonl", Stage::Worldgen)?)
    }

    pub fn load_split(&self) -> Result<UserSplit> {
        let s: UserSplit = read_json(&self.require("split.json", Stage::Worldgen)?)?;
        s.check_disjoint()?;
        Ok(s)
    }

    pub fn load_corpora(&self) -> Result<Vec<CorpusStage>> {
        StageKind::ALL
            .iter()
            .map(|k| read_corpus(&self.require(&format!("corpus_stage{}.jsonl", k.number()), Stage::Corpus)?))
            .collect()
    }

    pub fn load_ckpt(&self, name: &str, producer: Stage) -> Result<PolicyParams> {
        load_checkpoint(&self.require(name, producer)?)
    }

    pub fn load_rm(&self) -> Result<PersonalizationRM> {
        read_json(&self.require("rm.json", Stage::Uq2i)?)
    }

    pub fn load_samples(&self, split: Split) -> Result<Vec<crate::uq2i::Uq2iSample>> {
        read_samples(&self.require(sample_file(split), Stage::Uq2i)?)
    }

    /// Trajectories of users in `pool`.
    pub fn trajectories_of(trajectories: &[Trajectory], pool: &[UserId]) -> Vec<Trajectory> {
        let keep: BTreeSet<UserId> = pool.iter().copied().collect();
        trajectories
            .iter()
            .filter(|t| keep.contains(&t.user_id))
            .cloned()
            .collect()
    }

    fn worldgen(&self) -> Result<Vec<String>> {
        let c = &self.config;
        let world = generate_world(&c.world)?;
        let split = UserSplit::partition(&world, [c.split.sft_fraction, c.split.rl_fraction], c.seed)?;
        let all: Vec<UserId> = world.users.iter().map(|u| u.user_id).collect();
        let trajectories = world.simulate_users(&all, c.seed)?;
        write_world(&self.path("world.jsonl"), &world)?;
        write_jsonl(&self.path("trajectories.jsonl"), &trajectories)?;
        write_json(&self.path("split.json"), &split)?;
        Ok(names(&["world.jsonl", "trajectories.jsonl", "split.json"]))
    }

    fn corpus(&self) -> Result<Vec<String>> {
        let Base { world, vocab } = self.load_base()?;
        let split = self.load_split()?;
        let train = Self::trajectories_of(&self.load_trajectories()?, &split.training_users());
        let stages = build_all(
            &world,
            &vocab,
            &train,
            self.config.pretrain.mode,
            &self.config.corpus,
            self.config.seed,
        )?;
        let mut out = Vec::new();
        for s in &stages {
            let name = format!("corpus_stage{}.jsonl", s.stage.number());
            write_corpus(&self.path(&name), s)?;
            out.push(name);
        }
        Ok(out)
    }

    /// Fresh parameters for this world's vocabulary.
    pub fn init_params(&self, vocab: &Vocabulary) -> Result<PolicyParams> {
        PolicyParams::init(ModelConfig::for_vocab(vocab.len()), self.config.seed)
    }

    fn pretrain(&self) -> Result<Vec<String>> {
        let Base { vocab, .. } = self.load_base()?;
        let corpora = self.load_corpora()?;
        let p = &self.config.pretrain;
        let outcome = pretrain(
            self.init_params(&vocab)?,
            &corpora,
            p.schedule,
            &p.train,
            &p.plan,
            self.config.seed,
        )?;
        if !outcome.params.is_finite() {
            return Err(Error::Numeric("pre-training produced non-finite parameters".into()));
        }
        save_checkpoint(&outcome.params, &self.path("pretrain.ckpt"))?;
        let mut out = names(&["pretrain.ckpt", "pretrain_log.jsonl"]);
        write_jsonl(
            &self.path("pretrain_log.jsonl"),
            outcome
                .losses
                .iter()
                .enumerate()
                .map(|(step, loss)| LossRecord { step, loss: *loss }),
        )?;
        // The last snapshot equals the final parameters.
        let n = outcome.stage_snapshots.len().saturating_sub(1);
        for (k, snap) in outcome.stage_snapshots[..n].iter().enumerate() {
            let name = format!("pretrain_stage{}.ckpt", k + 1);
            save_checkpoint(snap, &self.path(&name))?;
            out.push(name);
        }
        Ok(out)
    }

    fn uq2i(&self) -> Result<Vec<String>> {
        let Base { world, vocab } = self.load_base()?;
        let split = self.load_split()?;
        let trajectories = self.load_trajectories()?;
        let c = &self.config;
        let train = Self::trajectories_of(&trajectories, &split.training_users());
        let rm = PersonalizationRM::train(&world, &interactions_from(&train), &c.rm)?;
        let index = build_query_index(&world, &vocab, &c.uq2i, c.seed)?;
        let histories = histories_by_user(&trajectories);
        write_json(&self.path("rm.json"), &rm)?;
        write_json(&self.path("query_index.json"), &index)?;
        let mut out = names(&["rm.json", "query_index.json"]);
        for (split_kind, n) in [
            (Split::Sft, c.uq2i.n_sft),
            (Split::Rl, c.uq2i.n_rl),
            (Split::Eval, c.uq2i.n_eval),
        ] {
            let samples = synthesize_dataset(
                &world, &vocab, &index, &rm, &split, &histories, split_kind, n, &c.uq2i, c.seed,
            )?;
            let name = sample_file(split_kind);
            write_samples(&self.path(name), &samples, &world, &vocab, c.uq2i.history_window)?;
            out.push(name.to_string());
        }
        Ok(out)
    }

    pub fn load_query_index(&self) -> Result<QueryIndex> {
        read_json(&self.require("query_index.json", Stage::Uq2i)?)
    }

    /// `n` extra samples of one split from the recorded RM and query index,
    /// written to `uq2i_<split>_n<n>.jsonl`. Returns the file name.
    pub fn synthesize_split(&self, split_kind: Split, n: usize) -> Result<String> {
        let started = Instant::now();
        let Base { world, vocab } = self.load_base()?;
        let (rm, index) = (self.load_rm()?, self.load_query_index()?);
        let split = self.load_split()?;
        let histories = histories_by_user(&self.load_trajectories()?);
        let c = &self.config;
        let samples = synthesize_dataset(
            &world, &vocab, &index, &rm, &split, &histories, split_kind, n, &c.uq2i, c.seed,
        )?;
        let stem = sample_file(split_kind).trim_end_matches(".jsonl");
        let name = format!("{stem}_n{n}.jsonl");
        write_samples(&self.path(&name), &samples, &world, &vocab, c.uq2i.history_window)?;
        let inputs = [
            ("world.jsonl", Stage::Worldgen),
            ("trajectories.jsonl", Stage::Worldgen),
            ("split.json", Stage::Worldgen),
            ("rm.json", Stage::Uq2i),
            ("query_index.json", Stage::Uq2i),
        ];
        self.record(
            &format!("{stem}-n{n}").replace('_', "-"),
            &inputs,
            &[name.clone()],
            started,
        )?;
        Ok(name)
    }

    /// Instruction-tune `params` on the sft split.
    pub fn run_sft(&self, params: &mut PolicyParams, base: &Base) -> Result<Vec<f64>> {
        let samples = self.load_samples(Split::Sft)?;
        let c = &self.config;
        sft(
            params,
            &samples,
            &base.world,
            &base.vocab,
            c.uq2i.history_window,
            &c.sft,
            c.seed,
        )
    }

    fn sft(&self) -> Result<Vec<String>> {
        let base = self.load_base()?;
        let mut params = self.load_ckpt("pretrain.ckpt", Stage::Pretrain)?;
        let losses = self.run_sft(&mut params, &base)?;
        if !params.is_finite() {
            return Err(Error::Numeric("SFT produced non-finite parameters".into()));
        }
        save_checkpoint(&params, &self.path("sft.ckpt"))?;
        write_jsonl(
            &self.path("sft_log.jsonl"),
            losses
                .iter()
                .enumerate()
                .map(|(step, loss)| LossRecord { step, loss: *loss }),
        )?;
        Ok(names(&["sft.ckpt", "sft_log.jsonl"]))
    }

    /// GRPO from the SFT checkpoint under `rewards`. Returns the tuned policy
    /// and its log.
    pub fn run_rl(
        &self,
        base: &Base,
        rewards: &crate::rewards::RewardsConfig,
    ) -> Result<(PolicyParams, Vec<RlLogRecord>)> {
        let reference = self.load_ckpt("sft.ckpt", Stage::Sft)?;
        self.run_rl_from(base, rewards, reference.clone(), reference)
    }

    /// GRPO starting at `policy` against the frozen `reference`.
    pub fn run_rl_from(
        &self,
        base: &Base,
        rewards: &crate::rewards::RewardsConfig,
        mut policy: PolicyParams,
        reference: PolicyParams,
    ) -> Result<(PolicyParams, Vec<RlLogRecord>)> {
        let split = self.load_split()?;
        let rm = self.load_rm()?;
        let samples = self.load_samples(Split::Rl)?;
        let scoring = ScoringContext {
            world: &base.world,
            vocab: &base.vocab,
            rm: &rm,
            config: rewards,
        };
        let c = &self.config;
        let log = rl_train(
            &mut policy,
            &reference,
            &samples,
            &scoring,
            &split,
            c.uq2i.history_window,
            &c.rl,
            c.seed,
        )?;
        if !policy.is_finite() {
            return Err(Error::Numeric("RL produced non-finite parameters".into()));
        }
        Ok((policy, log))
    }

    fn rl(&self) -> Result<Vec<String>> {
        let base = self.load_base()?;
        let (policy, log) = self.run_rl(&base, &self.config.rewards)?;
        save_checkpoint(&policy, &self.path("rl.ckpt"))?;
        write_jsonl(&self.path("rl_log.jsonl"), &log)?;
        Ok(names(&["rl.ckpt", "rl_log.jsonl"]))
    }

    /// Offline metrics, probes and U2I perplexity of `params`.
    pub fn evaluate(&self, params: &PolicyParams, base: &Base) -> Result<(MetricsReport, Vec<DecodedList>)> {
        let c = &self.config;
        let split = self.load_split()?;
        let prompts = self.load_samples(Split::Eval)?;
        let rm = self.load_rm()?;
        let (m, decoded) = evaluate_policy(
            params,
            &base.world,
            &base.vocab,
            &prompts,
            &split,
            c.uq2i.history_window,
            c.rewards.rel_fraction,
        )?;
        let heldout = Self::trajectories_of(&self.load_trajectories()?, &split.eval);
        let u2i_ppl = eval_u2i_ppl(params, &base.world, &base.vocab, &heldout)?;
        let (music, q2i) = knowledge_probes(params, &base.world, &base.vocab, c.eval.n_probes, c.seed)?;
        let report = MetricsReport {
            personalization: m.personalization,
            relevance_pct: m.relevance_pct,
            diversity_pct: m.diversity_pct,
            factuality_pct: m.factuality_pct,
            u2i_ppl,
            music_knowledge_acc: music,
            q2i_acc: q2i,
            n_eval_prompts: m.n_eval_prompts,
            config_fingerprint: c.fingerprint(),
            rm_oracle_gap: rm_oracle_gap(&base.world, &rm, &prompts, &decoded)?,
            distinct_artists: distinct_artists(&base.world, &decoded),
        };
        report.validate()?;
        Ok((report, decoded))
    }

    fn eval(&self) -> Result<Vec<String>> {
        let base = self.load_base()?;
        let params = self.load_ckpt("rl.ckpt", Stage::Rl)?;
        let (report, decoded) = self.evaluate(&params, &base)?;
        write_json(&self.path("report.json"), &report)?;
        write_csv(&self.path("report.csv"), MetricsReport::CSV_HEADER, [report.csv_row()])?;
        write_jsonl(&self.path("decoded.jsonl"), &decoded)?;
        Ok(names(&["report.json", "report.csv", "decoded.jsonl"]))
    }

    /// Files in the output directory not covered by exactly one manifest
    /// entry (the manifest itself excepted).
    pub fn unaccounted_files(&self) -> Result<Vec<String>> {
        let m = self.manifest()?.ok_or_else(|| Error::MissingArtifact {
            stage: "run-all".into(),
            path: self.path(MANIFEST),
        })?;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for e in &m.entries {
            for name in e.outputs.keys() {
                *counts.entry(name.clone()).or_default() += 1;
            }
        }
        let mut bad = Vec::new();
        for entry in fs::read_dir(&self.out).map_err(|e| Error::io(&self.out, e))? {
            let entry = entry.map_err(|e| Error::io(&self.out, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name != MANIFEST && counts.get(&name) != Some(&1) {
                bad.push(name);
            }
        }
        bad.extend(counts.into_iter().filter(|(_, c)| *c != 1).map(|(n, _)| n));
        bad.sort();
        bad.dedup();
        Ok(bad)
    }
}

pub fn sample_file(split: Split) -> &'static str {
    match split {
        Split::Sft => "uq2i_sft.jsonl",
        Split::Rl => "uq2i_rl.jsonl",
        Split::Eval => "uq2i_eval.jsonl",
    }
}

#[derive(Serialize, Deserialize)]
struct LossRecord {
    step: usize,
    loss: f64,
}

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Write a header line and preformatted rows.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
