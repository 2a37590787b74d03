//! On-disk formats: JSON, JSONL and content hashes.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusStage, MaskedSequence, StageKind};
use crate::error::{Error, Result};
use crate::uq2i::{render_list, Uq2iSample};
use crate::vocab::Vocabulary;
use crate::world::{Genre, Song, TagId, UserSpec, World, WorldConfig};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Lines of `world.jsonl`: one header, then every song and every user.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WorldRecord {
    Header {
        config: WorldConfig,
        tag_names: Vec<String>,
        state_names: Vec<String>,
        state_tags: Vec<Vec<TagId>>,
        artist_genres: Vec<Genre>,
        affinity_range: (f64, f64),
    },
    Song(Song),
    User(UserSpec),
}

pub fn write_world(path: &Path, world: &World) -> Result<()> {
    let header = WorldRecord::Header {
        config: world.config.clone(),
        tag_names: world.tag_names.clone(),
        state_names: world.state_names.clone(),
        state_tags: world.state_tags.clone(),
        artist_genres: world.artist_genres.clone(),
        affinity_range: world.affinity_range,
    };
    let records = std::iter::once(header)
        .chain(world.songs.iter().cloned().map(WorldRecord::Song))
        .chain(world.users.iter().cloned().map(WorldRecord::User));
    write_jsonl(path, records)
}

pub fn read_world(path: &Path) -> Result<World> {
    let mut records = read_jsonl::<WorldRecord>(path)?.into_iter();
    let Some(WorldRecord::Header {
        config,
        tag_names,
        state_names,
        state_tags,
        artist_genres,
        affinity_range,
    }) = records.next()
    else {
        return Err(Error::Input(format!("{}: missing header record", path.display())));
    };
    let mut world = World {
        config,
        tag_names,
        state_names,
        state_tags,
        artist_genres,
        songs: Vec::new(),
        users: Vec::new(),
        affinity_range,
    };
    for r in records {
        match r {
            WorldRecord::Song(s) => world.songs.push(s),
            WorldRecord::User(u) => world.users.push(u),
            WorldRecord::Header { .. } => {
                return Err(Error::Input(format!("{}: repeated header", path.display())));
            }
        }
    }
    let ids_ok = world.songs.iter().enumerate().all(|(i, s)| s.song_id.index() == i)
        && world.users.iter().enumerate().all(|(i, u)| u.user_id.index() == i);
    if !ids_ok {
        return Err(Error::Input(format!(
            "{}: ids are not dense and ordered",
            path.display()
        )));
    }
    Ok(world)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CorpusRecord {
    Header { stage: StageKind, token_budget: usize },
    Sequence(MaskedSequence),
}

pub fn write_corpus(path: &Path, stage: &CorpusStage) -> Result<()> {
    let header = CorpusRecord::Header {
        stage: stage.stage,
        token_budget: stage.token_budget,
    };
    write_jsonl(
        path,
        std::iter::once(header).chain(stage.sequences.iter().cloned().map(CorpusRecord::Sequence)),
    )
}

pub fn read_corpus(path: &Path) -> Result<CorpusStage> {
    let mut records = read_jsonl::<CorpusRecord>(path)?.into_iter();
    let Some(CorpusRecord::Header { stage, token_budget }) = records.next() else {
        return Err(Error::Input(format!("{}: missing header record", path.display())));
    };
    let sequences = records
        .map(|r| match r {
            CorpusRecord::Sequence(s) => MaskedSequence::new(s.tokens, s.loss_mask),
            CorpusRecord::Header { .. } => Err(Error::Input(format!("{}: repeated header", path.display()))),
        })
        .collect::<Result<_>>()?;
    Ok(CorpusStage {
        stage,
        sequences,
        token_budget,
    })
}

/// A sample plus human-readable renderings of its prompt and target.
#[derive(Serialize, Deserialize)]
struct SampleRecord {
    #[serde(flatten)]
    sample: Uq2iSample,
    #[serde(default)]
    prompt_tokens: Vec<String>,
    #[serde(default)]
    target_tokens: Vec<String>,
}

pub fn write_samples(
    path: &Path,
    samples: &[Uq2iSample],
    world: &World,
    vocab: &Vocabulary,
    window: usize,
) -> Result<()> {
    let records = samples
        .iter()
        .map(|s| {
            Ok(SampleRecord {
                prompt_tokens: vocab.render(&s.prompt(world, vocab, window)?),
                target_tokens: vocab.render(&render_list(vocab, &s.output_items)),
                sample: s.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(path, records)
}

pub fn read_samples(path: &Path) -> Result<Vec<Uq2iSample>> {
    Ok(read_jsonl::<SampleRecord>(path)?
        .into_iter()
        .map(|r| r.sample)
        .collect())
}
