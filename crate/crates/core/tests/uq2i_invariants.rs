//! Instruction-data invariants on a default-scale world.

use std::collections::BTreeSet;

use rand::Rng;
use tunechat::pipeline::{Pipeline, PipelineConfig, Stage};
use tunechat::rng;
use tunechat::uq2i::{kmeans, kmeans_objective, Split};
use tunechat::world::oracle_relevance;

#[test]
fn synthesized_samples_satisfy_every_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        out_dir: dir.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let p = Pipeline::new(config, None).unwrap();
    p.run(&[Stage::Worldgen], false).unwrap();
    p.run(&[Stage::Uq2i], false).unwrap();
    let base = p.load_base().unwrap();
    let w = &base.world;
    let index = p.load_query_index().unwrap();
    let rm = p.load_rm().unwrap();
    let split = p.load_split().unwrap();

    for cl in &index.clusters {
        assert!(!cl.member_queries.is_empty() && !cl.indexed_songs.is_empty());
        for s in &cl.indexed_songs {
            let song = &w.songs[s.index()];
            assert!(song.on_platform);
            assert!(cl.member_queries.iter().any(|&q| oracle_relevance(
                &index.queries[q as usize].intent_tags,
                song,
                w.config.relevance_threshold
            )));
        }
    }

    let pools: Vec<BTreeSet<_>> = [Split::Sft, Split::Rl, Split::Eval]
        .iter()
        .map(|&s| split.pool(s).iter().copied().collect())
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(pools[i].is_disjoint(&pools[j]), "pools {i} and {j} overlap");
        }
    }

    let (mut lift_out, mut lift_all, mut n) = (0.0, 0.0, 0usize);
    for (k, sp) in [Split::Sft, Split::Rl, Split::Eval].into_iter().enumerate() {
        let samples = p.load_samples(sp).unwrap();
        assert!(!samples.is_empty());
        for s in &samples {
            assert_eq!(s.split, sp);
            assert!(
                pools[k].contains(&s.user_id),
                "sample {} user outside its pool",
                s.sample_id
            );
            let distinct: BTreeSet<_> = s.output_items.iter().collect();
            assert_eq!((s.output_items.len(), distinct.len()), (10, 10));
            assert!(s.output_items.iter().all(|i| w.songs[i.index()].on_platform));
            assert!(s.rm_scores.windows(2).all(|x| x[0] >= x[1]));
            let cluster = &index.clusters[s.cluster_id as usize];
            assert!(cluster.member_queries.contains(&s.query.query_id));
            assert!(s.output_items.iter().all(|i| cluster.indexed_songs.contains(i)));
            let user = &w.users[s.user_id.index()];
            assert_eq!(rm.score_many(w, user, &s.output_items, s.state), s.rm_scores);

            let aff = |ids: &mut dyn Iterator<Item = tunechat::world::SongId>| {
                let v: Vec<f64> = ids.map(|i| w.oracle_affinity(user, i, s.state).unwrap()).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            lift_out += aff(&mut s.output_items.iter().copied());
            lift_all += aff(&mut cluster.indexed_songs.iter().copied());
            n += 1;
        }
    }
    assert!(n >= 100);
    assert!(
        lift_out > lift_all,
        "filtered {} vs candidates {}",
        lift_out / n as f64,
        lift_all / n as f64
    );
}

#[test]
fn kmeans_beats_random_assignments() {
    let mut r = rng::stream(31, 0);
    let points: Vec<Vec<f64>> = (0..100)
        .map(|_| {
            let mut v = vec![0.0; 12];
            for _ in 0..r.random_range(1..4) {
                v[r.random_range(0..12)] = 1.0;
            }
            v
        })
        .collect();
    let k = 8;
    let fitted = kmeans_objective(&points, &kmeans(&points, k, &mut r, 100), k);
    for _ in 0..50 {
        let random: Vec<usize> = (0..points.len()).map(|_| r.random_range(0..k)).collect();
        assert!(fitted <= kmeans_objective(&points, &random, k));
    }
}
