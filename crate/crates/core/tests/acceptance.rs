//! Acceptance criteria, one pass/fail line each. A single default-scale
//! pipeline run backs every criterion that needs trained checkpoints; the
//! criteria run sequentially so the runtime budgets are measured unshared.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use tunechat::corpus::{encode_trajectory, EncodeMode, MaskedSequence};
use tunechat::pipeline::ablate::{ContextRow, PolicyRow, ProbeRow, ScalingRow};
use tunechat::pipeline::{Manifest, Pipeline, PipelineConfig, Stage};
use tunechat::policy::check_gradients;
use tunechat::uq2i::{encode_sample, Split};
use tunechat::world::{generate_world, WorldConfig};

const GRAD_REL_ERR: f64 = 1e-3;
const GRAD_BUDGET_S: f64 = 60.0;
const GRAD_EPSILON: f64 = 1e-5;
const GRPO_TOL: f64 = 1e-8;
const ADV_SUM_TOL: f64 = 1e-9;
const SELF_KL_TOL: f64 = 1e-10;
const PRETRAIN_BUDGET_S: f64 = 30.0 * 60.0;
const REL_DROP_POINTS: f64 = 20.0;
const SCALING_MAX_INVERSIONS: usize = 1;
const SCALING_MAX_INVERSION_POINTS: f64 = 1.0;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Ctx {
    p: Pipeline,
    pretrain_s: f64,
}

fn c1_gradients(ctx: &Ctx) -> Outcome {
    let started = Instant::now();
    let p = &ctx.p;
    let base = p.load_base().map_err(|e| e.to_string())?;
    let traj = &p.load_trajectories().map_err(|e| e.to_string())?[0];
    let profile = &base.world.users[traj.user_id.index()].profile;
    let behavior = encode_trajectory(&base.vocab, traj, profile, EncodeMode::NextBehavior).unwrap();
    let sample = &p.load_samples(Split::Sft).unwrap()[0];
    let instruction = encode_sample(sample, &base.world, &base.vocab, p.config.uq2i.history_window).unwrap();
    let points: [(&str, _, &MaskedSequence); 3] = [
        ("init", p.init_params(&base.vocab).unwrap(), &behavior),
        (
            "mid-pretrain",
            p.load_ckpt("pretrain_stage1.ckpt", Stage::Pretrain).unwrap(),
            &behavior,
        ),
        ("post-SFT", p.load_ckpt("sft.ckpt", Stage::Sft).unwrap(), &instruction),
    ];
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for (name, params, seq) in &points {
        let err = check_gradients(params, seq, GRAD_EPSILON, 3).map_err(|e| e.to_string())?;
        worst = worst.max(err);
        parts.push(format!("{name} {err:.1e}"));
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst < GRAD_REL_ERR && secs < GRAD_BUDGET_S,
        format!(
            "{} in {secs:.1}s (max rel err < {GRAD_REL_ERR:e}, < {GRAD_BUDGET_S}s)",
            parts.join(", ")
        ),
    )
}

fn c2_grpo() -> Outcome {
    let dev = common::oracles::bernoulli_max_deviation(500);
    let (adv, kl) = common::oracles::advantage_and_self_kl(1000);
    check(
        dev < GRPO_TOL && adv < ADV_SUM_TOL && kl <= SELF_KL_TOL,
        format!("closed-form deviation {dev:.1e}, advantage sum {adv:.1e}, KL(p||p) {kl:.1e}"),
    )
}

fn c3_gate() -> Outcome {
    let bad = common::oracles::gate_violations(10_000);
    check(
        bad == 0,
        format!("{bad} of 10000 breakdowns changed under personalization perturbation"),
    )
}

fn c4_rules() -> Outcome {
    let world = generate_world(&WorldConfig::default()).unwrap();
    let bad = common::oracles::rule_mismatches(&world, 1000);
    check(
        bad == 0,
        format!("{bad} of 1000 lists disagree with the brute-force counters"),
    )
}

fn c5_density(ctx: &Ctx) -> Outcome {
    let base = ctx.p.load_base().map_err(|e| e.to_string())?;
    let trajectories = ctx.p.load_trajectories().map_err(|e| e.to_string())?;
    let mut bad = 0;
    for t in &trajectories {
        let profile = &base.world.users[t.user_id.index()].profile;
        let nb = encode_trajectory(&base.vocab, t, profile, EncodeMode::NextBehavior).unwrap();
        let ni = encode_trajectory(&base.vocab, t, profile, EncodeMode::NextItem).unwrap();
        bad += usize::from(nb.supervised() != 2 * t.events.len() || ni.supervised() != 1);
    }
    let race = common::density::race();
    check(
        bad == 0 && common::density::next_behavior_wins(race),
        format!(
            "{bad} of {} trajectories with wrong mask counts; steps to target PPL (next_behavior, next_item) {race:?}",
            trajectories.len()
        ),
    )
}

fn c6_pretrain(ctx: &Ctx) -> Outcome {
    let started = Instant::now();
    let rows: Vec<ProbeRow> = ctx.p.ablate_pretrain().map_err(|e| e.to_string())?;
    let secs = ctx.pretrain_s + started.elapsed().as_secs_f64();
    let row = |v: &str| rows.iter().find(|r| r.variant == v).unwrap();
    let (none, s1, s12, cur, mix) = (
        row("none"),
        row("stage1"),
        row("stage1+2"),
        row("curriculum"),
        row("mixed"),
    );
    let wins = usize::from(cur.music_knowledge_acc > mix.music_knowledge_acc)
        + usize::from(cur.q2i_acc > mix.q2i_acc)
        + usize::from(cur.u2i_ppl < mix.u2i_ppl);
    let stages =
        s1.music_knowledge_acc > none.music_knowledge_acc && s12.q2i_acc > s1.q2i_acc && cur.u2i_ppl < s12.u2i_ppl;
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{} {:.1}/{:.1}/{:.1}",
                r.variant, r.music_knowledge_acc, r.q2i_acc, r.u2i_ppl
            )
        })
        .collect();
    check(
        wins >= 2 && stages && secs < PRETRAIN_BUDGET_S,
        format!(
            "curriculum beats mixed on {wins}/3; stage gains {stages}; {secs:.0}s; music/q2i/ppl: {}",
            table.join(", ")
        ),
    )
}

fn c7_context(ctx: &Ctx) -> Outcome {
    let rows: Vec<ContextRow> = ctx.p.ablate_context().map_err(|e| e.to_string())?;
    let ppl: Vec<f64> = rows.iter().map(|r| r.u2i_ppl).collect();
    check(
        rows.len() == 4 && ppl.windows(2).all(|w| w[1] <= w[0]),
        format!("U2I PPL items / +profile / +state / +feedback: {ppl:.2?}"),
    )
}

fn policy_line(rows: &[PolicyRow]) -> String {
    rows.iter()
        .map(|r| {
            format!(
                "{} rel {:.1} pers {:.3} div {:.1} fact {:.1}",
                r.variant, r.relevance_pct, r.personalization, r.diversity_pct, r.factuality_pct
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn c8_rewards(ctx: &Ctx) -> Outcome {
    let rows = ctx.p.ablate_rewards().map_err(|e| e.to_string())?;
    let row = |v: &str| rows.iter().find(|r| r.variant == v).unwrap();
    let (full, np, nr, nrule) = (row("full"), row("-pers"), row("-rel"), row("-rule"));
    let mut failed = Vec::new();
    if full.relevance_pct - nr.relevance_pct < REL_DROP_POINTS {
        failed.push("-rel relevance drop < 20 points");
    }
    if nr.personalization <= full.personalization {
        failed.push("-rel personalization did not rise");
    }
    if np.personalization >= full.personalization {
        failed.push("-pers personalization did not drop");
    }
    if nrule.factuality_pct >= full.factuality_pct {
        failed.push("-rule factuality did not drop");
    }
    if nrule.diversity_pct >= full.diversity_pct {
        failed.push("-rule diversity did not drop");
    }
    check(
        failed.is_empty(),
        format!("[{}] {}", failed.join(", "), policy_line(&rows)),
    )
}

fn c9_training_stage(ctx: &Ctx) -> Outcome {
    let rows = ctx.p.ablate_training_stage().map_err(|e| e.to_string())?;
    let rel: Vec<f64> = rows.iter().map(|r| r.relevance_pct).collect();
    let pers: Vec<f64> = rows.iter().map(|r| r.personalization).collect();
    let rising = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
    check(
        rows.len() == 3 && rising(&rel) && rising(&pers),
        format!(
            "relevance ordered {}, personalization ordered {}: {}",
            rising(&rel),
            rising(&pers),
            policy_line(&rows)
        ),
    )
}

fn c10_uq2i(ctx: &Ctx) -> Outcome {
    let p = &ctx.p;
    let world = p.load_base().map_err(|e| e.to_string())?.world;
    let index = p.load_query_index().map_err(|e| e.to_string())?;
    let split = p.load_split().map_err(|e| e.to_string())?;
    let sft: BTreeSet<_> = split.pool(Split::Sft).iter().collect();
    let rl: BTreeSet<_> = split.pool(Split::Rl).iter().collect();
    let (mut total, mut bad) = (0, 0);
    for sp in [Split::Sft, Split::Rl, Split::Eval] {
        for s in p.load_samples(sp).map_err(|e| e.to_string())? {
            total += 1;
            let distinct: BTreeSet<_> = s.output_items.iter().collect();
            let cluster = &index.clusters[s.cluster_id as usize];
            let ok = s.output_items.len() == 10
                && distinct.len() == 10
                && s.output_items.iter().all(|i| world.songs[i.index()].on_platform)
                && s.rm_scores.windows(2).all(|w| w[0] >= w[1])
                && cluster.member_queries.contains(&s.query.query_id)
                && s.output_items.iter().all(|i| cluster.indexed_songs.contains(i));
            bad += usize::from(!ok);
        }
    }
    let disjoint = sft.is_disjoint(&rl);
    check(
        bad == 0 && disjoint && total > 0,
        format!("{bad} of {total} samples violate an invariant; sft/rl pools disjoint {disjoint}"),
    )
}

/// Inversions between consecutive budgets and the largest one, in points.
fn inversions(v: &[f64]) -> (usize, f64) {
    v.windows(2)
        .filter(|w| w[1] < w[0])
        .fold((0, 0.0), |(n, m), w| (n + 1, f64::max(m, w[0] - w[1])))
}

fn c11_scaling(ctx: &Ctx) -> Outcome {
    let budgets = &ctx.p.config.eval.scaling_budgets;
    let rows: Vec<ScalingRow> = ctx.p.scaling_sweep(budgets).map_err(|e| e.to_string())?;
    let music: Vec<f64> = rows.iter().map(|r| r.music_knowledge_acc).collect();
    let q2i: Vec<f64> = rows.iter().map(|r| r.q2i_acc).collect();
    let ok = |v: &[f64]| {
        let (n, m) = inversions(v);
        n <= SCALING_MAX_INVERSIONS && m <= SCALING_MAX_INVERSION_POINTS
    };
    check(
        rows.len() >= 3 && ok(&music) && ok(&q2i),
        format!("budgets {budgets:?}: music {music:.1?}, q2i {q2i:.1?}"),
    )
}

fn run_cli(config: &Path) -> Manifest {
    let status = Command::new(env!("CARGO_BIN_EXE_tunechat"))
        .args(["--config", config.to_str().unwrap(), "run-all"])
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
    let p = Pipeline::load(config).unwrap();
    p.manifest().unwrap().unwrap()
}

fn c12_determinism() -> Outcome {
    // Reduced world and epochs; the same config file and output directory
    // for both runs, with the directory wiped in between.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("pipeline.toml");
    std::fs::write(&cfg, common::small_config(&out).to_toml()).unwrap();
    let first = run_cli(&cfg).output_hashes();
    std::fs::remove_dir_all(&out).unwrap();
    let second = run_cli(&cfg).output_hashes();
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    check(
        differing.is_empty() && first.len() == second.len(),
        format!("{} artifacts hashed, differing: {differing:?}", first.len()),
    )
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        out_dir: dir.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let p = Pipeline::new(config, None).unwrap();
    let started = Instant::now();
    let manifest = p.run(&Stage::ALL, false).expect("default-scale pipeline run");
    eprintln!("pipeline run-all: {:.0}s", started.elapsed().as_secs_f64());
    let pretrain_s = manifest.entry("pretrain").unwrap().wall_time_s;
    let ctx = Ctx { p, pretrain_s };

    let criteria: [(&str, &dyn Fn() -> Outcome); 12] = [
        ("gradient correctness", &|| c1_gradients(&ctx)),
        ("GRPO math oracle", &c2_grpo),
        ("reward gate exactness", &c3_gate),
        ("rule-reward oracle equivalence", &c4_rules),
        ("supervision density", &|| c5_density(&ctx)),
        ("pre-training stage ablation", &|| c6_pretrain(&ctx)),
        ("context ablation", &|| c7_context(&ctx)),
        ("reward ablation", &|| c8_rewards(&ctx)),
        ("training-stage ablation", &|| c9_training_stage(&ctx)),
        ("UQ2I invariants", &|| c10_uq2i(&ctx)),
        ("scaling sweep", &|| c11_scaling(&ctx)),
        ("end-to-end determinism", &c12_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {:>2} {tag} {name} ({secs:.0}s): {detail}", i + 1);
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
