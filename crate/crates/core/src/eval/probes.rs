//! Multiple-choice knowledge probes scored by next-token likelihood.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::PolicyParams;
use crate::rng;
use crate::vocab::{Keyword, TokenId, Vocabulary};
use crate::world::{SongId, TagId, World};

/// One 4-way question: which option token should follow `prefix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub prefix: Vec<TokenId>,
    pub options: Vec<TokenId>,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    /// "Which artist performs song s?"
    pub music: Vec<Probe>,
    /// "Which song matches these descriptors?" (1 relevant, 3 irrelevant).
    pub q2i: Vec<Probe>,
}

const OPTIONS: usize = 4;

fn shuffle_in<R: Rng>(correct: TokenId, mut wrong: Vec<TokenId>, r: &mut R) -> (Vec<TokenId>, usize) {
    wrong.truncate(OPTIONS - 1);
    let answer = r.random_range(0..OPTIONS);
    wrong.insert(answer, correct);
    (wrong, answer)
}

/// Build `n` probes of each kind. Music probes cover catalog facts rendered in
/// the stage-1 corpus; q2i probes use the stage-2 comment template.
pub fn build_probes(world: &World, vocab: &Vocabulary, n: usize, seed: u64) -> ProbeSet {
    let mut r = rng::stream(seed, rng::stream_id(40, 0));
    let n_artists = world.config.n_artists as u32;
    let music = (0..n)
        .map(|_| {
            let song = world.songs.choose(&mut r).expect("nonempty catalog");
            let mut others: Vec<u32> = (0..n_artists).filter(|&a| a != song.artist_id.0).collect();
            others.shuffle(&mut r);
            let wrong = others
                .into_iter()
                .map(|a| vocab.artist(crate::world::ArtistId(a)))
                .collect();
            let (options, answer) = shuffle_in(vocab.artist(song.artist_id), wrong, &mut r);
            Probe {
                prefix: vec![vocab.bos(), vocab.keyword(Keyword::Meta), vocab.song(song.song_id)],
                options,
                answer,
            }
        })
        .collect();

    let on: Vec<SongId> = world.on_platform().map(|s| s.song_id).collect();
    let mut q2i = Vec::with_capacity(n);
    while q2i.len() < n {
        let s = *on.choose(&mut r).expect("nonempty catalog");
        let song = &world.songs[s.index()];
        let k = r.random_range(1..=song.tags.len().min(2));
        let intent: Vec<TagId> = song.tags.choose_multiple(&mut r, k).copied().collect();
        let mut irrelevant: Vec<SongId> = on
            .iter()
            .copied()
            .filter(|&o| !world.is_relevant_id(&intent, o))
            .collect();
        if irrelevant.len() < OPTIONS - 1 {
            continue;
        }
        irrelevant.shuffle(&mut r);
        let wrong = irrelevant.into_iter().map(|o| vocab.song(o)).collect();
        let (options, answer) = shuffle_in(vocab.song(s), wrong, &mut r);
        let mut prefix = vec![vocab.bos(), vocab.keyword(Keyword::Comment)];
        prefix.extend(intent.iter().map(|&t| vocab.tag(t)));
        prefix.push(vocab.sep());
        q2i.push(Probe {
            prefix,
            options,
            answer,
        });
    }
    ProbeSet { music, q2i }
}

/// Percentage of probes where the answer option gets the highest next-token
/// logit. Ties resolve to the earliest option.
pub fn probe_accuracy(params: &PolicyParams, probes: &[Probe]) -> Result<f64> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let hits = probes
        .par_iter()
        .map(|p| {
            let fwd = params.forward(&p.prefix, &[p.prefix.len() - 1])?;
            let z = &fwd.logits[0];
            let mut best = 0;
            for (i, &o) in p.options.iter().enumerate() {
                if z[o as usize] > z[p.options[best] as usize] {
                    best = i;
                }
            }
            Ok(usize::from(best == p.answer))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(100.0 * hits.iter().sum::<usize>() as f64 / probes.len() as f64)
}

/// `(music_knowledge_acc, q2i_acc)` in percent.
pub fn knowledge_probes(
    params: &PolicyParams,
    world: &World,
    vocab: &Vocabulary,
    n_probes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let set = build_probes(world, vocab, n_probes, seed);
    Ok((probe_accuracy(params, &set.music)?, probe_accuracy(params, &set.q2i)?))
}
