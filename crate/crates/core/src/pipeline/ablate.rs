//! Experiment grids run on top of a completed pipeline: pre-training stages,
//! user-context components, reward components, training stages and token
//! budget scaling.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::artifacts::write_json;
use super::{write_csv, Base, Pipeline, Stage};
use crate::corpus::{build_stage3_with_layout, ContextLayout, CorpusStage};
use crate::error::{Error, Result};
use crate::eval::{distinct_artists, eval_u2i_ppl, eval_u2i_ppl_with_layout, evaluate_policy, knowledge_probes};
use crate::policy::{pretrain, train_epochs, Optimizer, PolicyParams, Schedule};
use crate::rewards::{RewardWeights, RewardsConfig};
use crate::uq2i::Split;

/// Knowledge and perplexity of one pre-trained policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub variant: String,
    pub music_knowledge_acc: f64,
    pub q2i_acc: f64,
    pub u2i_ppl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    pub profile: bool,
    pub state: bool,
    pub feedback: bool,
    pub u2i_ppl: f64,
}

/// Offline recommendation metrics of one tuned policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub variant: String,
    pub personalization: f64,
    pub relevance_pct: f64,
    pub diversity_pct: f64,
    pub factuality_pct: f64,
    pub distinct_artists: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub budget: f64,
    pub tokens: usize,
    pub music_knowledge_acc: f64,
    pub q2i_acc: f64,
    pub u2i_ppl: f64,
}

/// The reward variants of the reward ablation: full, then with the
/// personalization term, the relevance gate and the rule rewards removed.
pub fn reward_presets(full: &RewardsConfig) -> Vec<(&'static str, RewardsConfig)> {
    let no_pers = RewardsConfig {
        weights: RewardWeights {
            lambda_pers: 0.0,
            ..full.weights.clone()
        },
        ..full.clone()
    };
    let no_rel = RewardsConfig {
        relevance_gate: false,
        ..full.clone()
    };
    let no_rule = RewardsConfig {
        weights: RewardWeights {
            lambda_format: 0.0,
            lambda_fact: 0.0,
            lambda_div: 0.0,
            lambda_dedup: 0.0,
            ..full.weights.clone()
        },
        ..full.clone()
    };
    vec![
        ("full", full.clone()),
        ("-pers", no_pers),
        ("-rel", no_rel),
        ("-rule", no_rule),
    ]
}

impl Pipeline {
    /// Probe accuracies and U2I perplexity of `params`.
    pub fn probe_report(&self, params: &PolicyParams) -> Result<ProbeRow> {
        self.probe_row("checkpoint", params, &self.load_base()?)
    }

    fn probe_row(&self, variant: &str, params: &PolicyParams, base: &Base) -> Result<ProbeRow> {
        let split = self.load_split()?;
        let heldout = Self::trajectories_of(&self.load_trajectories()?, &split.eval);
        let (music, q2i) = knowledge_probes(
            params,
            &base.world,
            &base.vocab,
            self.config.eval.n_probes,
            self.config.seed,
        )?;
        Ok(ProbeRow {
            variant: variant.into(),
            music_knowledge_acc: music,
            q2i_acc: q2i,
            u2i_ppl: eval_u2i_ppl(params, &base.world, &base.vocab, &heldout)?,
        })
    }

    fn policy_row(&self, variant: &str, params: &PolicyParams, base: &Base) -> Result<PolicyRow> {
        let prompts = self.load_samples(Split::Eval)?;
        let c = &self.config;
        let (m, decoded) = evaluate_policy(
            params,
            &base.world,
            &base.vocab,
            &prompts,
            &self.load_split()?,
            c.uq2i.history_window,
            c.rewards.rel_fraction,
        )?;
        Ok(PolicyRow {
            variant: variant.into(),
            personalization: m.personalization,
            relevance_pct: m.relevance_pct,
            diversity_pct: m.diversity_pct,
            factuality_pct: m.factuality_pct,
            distinct_artists: distinct_artists(&base.world, &decoded),
        })
    }

    /// Untrained, after stage 1, after stages 1-2, the full curriculum and the
    /// mixed schedule at the same step count.
    pub fn ablate_pretrain(&self) -> Result<Vec<ProbeRow>> {
        let started = Instant::now();
        let base = self.load_base()?;
        let corpora = self.load_corpora()?;
        let p = &self.config.pretrain;
        let seed = self.config.seed;
        let init = self.init_params(&base.vocab)?;
        let other = match p.schedule {
            Schedule::Curriculum => Schedule::Mixed,
            Schedule::Mixed => Schedule::Curriculum,
        };
        let alt = pretrain(init.clone(), &corpora, other, &p.train, &p.plan, seed)?;
        let (curriculum, snapshots, mixed) = match p.schedule {
            Schedule::Curriculum => {
                let snaps = (1..=2)
                    .map(|k| self.load_ckpt(&format!("pretrain_stage{k}.ckpt"), Stage::Pretrain))
                    .collect::<Result<Vec<_>>>()?;
                (self.load_ckpt("pretrain.ckpt", Stage::Pretrain)?, snaps, alt.params)
            }
            Schedule::Mixed => {
                let snaps = alt.stage_snapshots[..2].to_vec();
                (alt.params, snaps, self.load_ckpt("pretrain.ckpt", Stage::Pretrain)?)
            }
        };
        let rows = vec![
            self.probe_row("none", &init, &base)?,
            self.probe_row("stage1", &snapshots[0], &base)?,
            self.probe_row("stage1+2", &snapshots[1], &base)?,
            self.probe_row("curriculum", &curriculum, &base)?,
            self.probe_row("mixed", &mixed, &base)?,
        ];
        let mut inputs = pretrain_inputs(p.schedule);
        if p.schedule == Schedule::Mixed {
            inputs.push(("pretrain.ckpt", Stage::Pretrain));
        }
        self.write_rows("ablate_pretrain", &rows, probe_csv(&rows), &inputs, started)?;
        Ok(rows)
    }

    /// Stage-3 training from the stage-2 checkpoint with each incremental
    /// context layout; perplexity is measured in the same layout.
    pub fn ablate_context(&self) -> Result<Vec<ContextRow>> {
        let started = Instant::now();
        let base = self.load_base()?;
        if self.config.pretrain.schedule != Schedule::Curriculum {
            return Err(Error::Config(
                "the context ablation needs a curriculum pre-training run".into(),
            ));
        }
        let start = self.load_ckpt("pretrain_stage2.ckpt", Stage::Pretrain)?;
        let split = self.load_split()?;
        let trajectories = self.load_trajectories()?;
        let train = Self::trajectories_of(&trajectories, &split.training_users());
        let heldout = Self::trajectories_of(&trajectories, &split.eval);
        let p = &self.config.pretrain;
        let tc = crate::policy::TrainConfig {
            epochs: p.plan.stage_epochs[2],
            ..p.train.clone()
        };
        let rows = ContextLayout::ABLATION_ROWS
            .iter()
            .map(|&layout| {
                let corpus = build_stage3_with_layout(&base.world, &base.vocab, &train, p.mode, layout)?;
                let mut params = start.clone();
                let mut opt = Optimizer::for_params(&tc, &params);
                train_epochs(&mut params, &mut opt, &corpus.sequences, &tc, self.config.seed)?;
                Ok(ContextRow {
                    profile: layout.profile,
                    state: layout.state,
                    feedback: layout.feedback,
                    u2i_ppl: eval_u2i_ppl_with_layout(&params, &base.world, &base.vocab, &heldout, layout)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let csv = std::iter::once("profile,state,feedback,u2i_ppl".to_string())
            .chain(
                rows.iter()
                    .map(|r| format!("{},{},{},{}", r.profile, r.state, r.feedback, r.u2i_ppl)),
            )
            .collect();
        let inputs = [
            ("world.jsonl", Stage::Worldgen),
            ("trajectories.jsonl", Stage::Worldgen),
            ("split.json", Stage::Worldgen),
            ("pretrain_stage2.ckpt", Stage::Pretrain),
        ];
        self.write_rows("ablate_context", &rows, csv, &inputs, started)?;
        Ok(rows)
    }

    /// RL from the SFT checkpoint under each reward preset. The full row
    /// reuses `rl.ckpt` when the rl stage has run.
    pub fn ablate_rewards(&self) -> Result<Vec<PolicyRow>> {
        let started = Instant::now();
        let base = self.load_base()?;
        let mut rows = Vec::new();
        for (name, rewards) in reward_presets(&self.config.rewards) {
            let params = if name == "full" && self.path("rl.ckpt").exists() {
                self.load_ckpt("rl.ckpt", Stage::Rl)?
            } else {
                self.run_rl(&base, &rewards)?.0
            };
            rows.push(self.policy_row(name, &params, &base)?);
        }
        let mut inputs = Stage::Rl.inputs().to_vec();
        inputs.push(("uq2i_eval.jsonl", Stage::Uq2i));
        if self.path("rl.ckpt").exists() {
            inputs.push(("rl.ckpt", Stage::Rl));
        }
        self.write_rows("ablate_rewards", &rows, policy_csv(&rows), &inputs, started)?;
        Ok(rows)
    }

    /// SFT alone, pre-training then SFT, and the full pipeline with RL.
    pub fn ablate_training_stage(&self) -> Result<Vec<PolicyRow>> {
        let started = Instant::now();
        let base = self.load_base()?;
        let mut sft_only = self.init_params(&base.vocab)?;
        self.run_sft(&mut sft_only, &base)?;
        let rows = vec![
            self.policy_row("sft", &sft_only, &base)?,
            self.policy_row("pretrain+sft", &self.load_ckpt("sft.ckpt", Stage::Sft)?, &base)?,
            self.policy_row("pretrain+sft+rl", &self.load_ckpt("rl.ckpt", Stage::Rl)?, &base)?,
        ];
        let inputs = [
            ("world.jsonl", Stage::Worldgen),
            ("split.json", Stage::Worldgen),
            ("uq2i_sft.jsonl", Stage::Uq2i),
            ("uq2i_eval.jsonl", Stage::Uq2i),
            ("sft.ckpt", Stage::Sft),
            ("rl.ckpt", Stage::Rl),
        ];
        self.write_rows("ablate_training_stage", &rows, policy_csv(&rows), &inputs, started)?;
        Ok(rows)
    }

    /// Pre-train from scratch on each fraction of every corpus stage. A zero
    /// budget leaves the policy untrained.
    pub fn scaling_sweep(&self, budgets: &[f64]) -> Result<Vec<ScalingRow>> {
        let started = Instant::now();
        if budgets.len() < 3 {
            return Err(Error::Config("a scaling sweep needs at least three budgets".into()));
        }
        if budgets.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("scaling budgets must lie in [0, 1]".into()));
        }
        let base = self.load_base()?;
        let corpora = self.load_corpora()?;
        let p = &self.config.pretrain;
        let seed = self.config.seed;
        let mut rows = Vec::new();
        for &b in budgets {
            let subset: Vec<CorpusStage> = corpora.iter().map(|c| c.subsample(b, seed)).collect();
            let tokens = subset.iter().map(CorpusStage::total_tokens).sum();
            let init = self.init_params(&base.vocab)?;
            let params = if subset.iter().any(|c| c.sequences.is_empty()) {
                init
            } else {
                pretrain(init, &subset, p.schedule, &p.train, &p.plan, seed)?.params
            };
            let r = self.probe_row("", &params, &base)?;
            rows.push(ScalingRow {
                budget: b,
                tokens,
                music_knowledge_acc: r.music_knowledge_acc,
                q2i_acc: r.q2i_acc,
                u2i_ppl: r.u2i_ppl,
            });
        }
        let csv = std::iter::once("budget,tokens,music_knowledge_acc,q2i_acc,u2i_ppl".to_string())
            .chain(rows.iter().map(|r| {
                format!(
                    "{},{},{},{},{}",
                    r.budget, r.tokens, r.music_knowledge_acc, r.q2i_acc, r.u2i_ppl
                )
            }))
            .collect();
        let inputs = pretrain_inputs(Schedule::Mixed);
        self.write_rows("scaling", &rows, csv, &inputs, started)?;
        Ok(rows)
    }

    /// Write `<name>.json` and `<name>.csv` and record them in the manifest.
    fn write_rows<T: Serialize>(
        &self,
        name: &str,
        rows: &[T],
        csv: Vec<String>,
        inputs: &[(&str, Stage)],
        started: Instant,
    ) -> Result<()> {
        let json = format!("{name}.json");
        let csv_name = format!("{name}.csv");
        write_json(&self.path(&json), &rows)?;
        let mut lines = csv.into_iter();
        let header = lines.next().unwrap_or_default();
        write_csv(&self.path(&csv_name), &header, lines)?;
        self.record(&name.replace('_', "-"), inputs, &[json, csv_name], started)
    }
}

fn pretrain_inputs(schedule: Schedule) -> Vec<(&'static str, Stage)> {
    let mut v = vec![
        ("world.jsonl", Stage::Worldgen),
        ("trajectories.jsonl", Stage::Worldgen),
        ("split.json", Stage::Worldgen),
        ("corpus_stage1.jsonl", Stage::Corpus),
        ("corpus_stage2.jsonl", Stage::Corpus),
        ("corpus_stage3.jsonl", Stage::Corpus),
    ];
    if schedule == Schedule::Curriculum {
        v.extend([
            ("pretrain.ckpt", Stage::Pretrain),
            ("pretrain_stage1.ckpt", Stage::Pretrain),
            ("pretrain_stage2.ckpt", Stage::Pretrain),
        ]);
    }
    v
}

fn probe_csv(rows: &[ProbeRow]) -> Vec<String> {
    std::iter::once("variant,music_knowledge_acc,q2i_acc,u2i_ppl".to_string())
        .chain(
            rows.iter()
                .map(|r| format!("{},{},{},{}", r.variant, r.music_knowledge_acc, r.q2i_acc, r.u2i_ppl)),
        )
        .collect()
}

fn policy_csv(rows: &[PolicyRow]) -> Vec<String> {
    std::iter::once("variant,personalization,relevance_pct,diversity_pct,factuality_pct,distinct_artists".to_string())
        .chain(rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.variant, r.personalization, r.relevance_pct, r.diversity_pct, r.factuality_pct, r.distinct_artists
            )
        }))
        .collect()
}

fn md_table(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let cols = header.split(',').count();
    let mut s = format!("| {} |\n|{}\n", header.replace(',', " | "), " --- |".repeat(cols));
    for r in rows {
        s.push_str(&format!("| {} |\n", r.replace(',', " | ")));
    }
    s
}

impl Pipeline {
    /// Collect `report.json` and every ablation table present into
    /// `report.md`, returning its text.
    pub fn report(&self) -> Result<String> {
        let started = Instant::now();
        let mut text = String::from("# Evaluation report\n\n");
        let mut read: Vec<&str> = Vec::new();
        if self.path("report.json").exists() {
            let r: crate::eval::MetricsReport = super::artifacts::read_json(&self.path("report.json"))?;
            text.push_str("## Final policy\n\n");
            text.push_str(&md_table(crate::eval::MetricsReport::CSV_HEADER, [r.csv_row()]));
            text.push('\n');
            read.push("report.json");
        }
        let sections: [(&str, &str); 5] = [
            ("ablate_pretrain", "Pre-training stages"),
            ("ablate_context", "User context"),
            ("ablate_rewards", "Reward components"),
            ("ablate_training_stage", "Training stages"),
            ("scaling", "Token budget scaling"),
        ];
        for (name, title) in sections {
            let csv = self.path(&format!("{name}.csv"));
            if !csv.exists() {
                continue;
            }
            let body = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
            let mut lines = body.lines().map(String::from);
            let header = lines.next().unwrap_or_default();
            text.push_str(&format!("## {title}\n\n{}\n", md_table(&header, lines)));
            read.push(match name {
                "ablate_pretrain" => "ablate_pretrain.csv",
                "ablate_context" => "ablate_context.csv",
                "ablate_rewards" => "ablate_rewards.csv",
                "ablate_training_stage" => "ablate_training_stage.csv",
                _ => "scaling.csv",
            });
        }
        if read.is_empty() {
            return Err(Error::MissingArtifact {
                stage: "eval".into(),
                path: self.path("report.json"),
            });
        }
        let out = self.path("report.md");
        std::fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
        let inputs: Vec<(&str, Stage)> = read.into_iter().map(|f| (f, Stage::Eval)).collect();
        self.record("report", &inputs, &["report.md".into()], started)?;
        Ok(text)
    }
}
