//! JSON-lines episode corpora with a manifest sidecar.
//!
//! `<name>.jsonl` holds one [`Episode`] per line; `<name>.manifest.json`
//! holds the [`CorpusManifest`]. Floats are written in shortest round-trip
//! form and parsed exactly, so a read returns bit-identical values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sim::{Episode, GenerationConfig};

pub const FORMAT_VERSION: &str = "RDGNN-DS-1";
pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl Splits {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: String,
    pub n_episodes: usize,
    pub seed: u64,
    pub config: GenerationConfig,
    pub splits: Splits,
}

impl CorpusManifest {
    pub fn new(n_episodes: usize, seed: u64, config: GenerationConfig, splits: Splits) -> Self {
        Self {
            format_version: FORMAT_VERSION.to_string(),
            n_episodes,
            seed,
            config,
            splits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION.to_string(),
                found: self.format_version.clone(),
            });
        }
        let mut all: Vec<u64> = self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
            .copied()
            .collect();
        all.sort_unstable();
        if all != (0..self.n_episodes as u64).collect::<Vec<_>>() {
            return invalid("manifest splits are not a partition of the episode indices");
        }
        Ok(())
    }
}

/// `dir/name.jsonl` → `dir/name.manifest.json`.
pub fn manifest_path(corpus: &Path) -> PathBuf {
    let stem = corpus
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    corpus.with_file_name(format!("{stem}.manifest.json"))
}

/// Seed-deterministic shuffle of `0..n`, cut into train/val/test.
pub fn split(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1"));
    }
    let mut idx: Vec<u64> = (0..n as u64).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Splits {
        train: idx,
        val,
        test,
    })
}

/// Streams episodes to a JSON-lines file.
pub struct CorpusWriter {
    out: BufWriter<File>,
    count: usize,
}

impl CorpusWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
            count: 0,
        })
    }

    pub fn write(&mut self, episode: &Episode) -> Result<()> {
        serde_json::to_writer(&mut self.out, episode)?;
        self.out.write_all(b"\n")?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush()?;
        Ok(self.count)
    }
}

pub fn write_manifest(corpus: &Path, manifest: &CorpusManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(manifest_path(corpus), text + "\n")?;
    Ok(())
}

pub fn read_manifest(corpus: &Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(manifest_path(corpus))?;
    let m: CorpusManifest = serde_json::from_str(&text)?;
    m.validate()?;
    Ok(m)
}

/// Writes the corpus and its manifest.
pub fn write_corpus<'a>(
    path: &Path,
    episodes: impl IntoIterator<Item = &'a Episode>,
    manifest: &CorpusManifest,
) -> Result<()> {
    let mut w = CorpusWriter::create(path)?;
    for e in episodes {
        w.write(e)?;
    }
    let n = w.finish()?;
    if n != manifest.n_episodes {
        return invalid(format!("manifest lists {} episodes, wrote {n}", manifest.n_episodes));
    }
    write_manifest(path, manifest)
}

/// Line-at-a-time reader; holds at most one episode in memory.
pub struct CorpusReader {
    lines: std::io::Lines<BufReader<File>>,
    line: usize,
}

impl CorpusReader {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self {
            lines: BufReader::new(File::open(path)?).lines(),
            line: 0,
        })
    }
}

impl Iterator for CorpusReader {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        let text = self.lines.next()?;
        self.line += 1;
        let line = self.line;
        Some(match text {
            Err(e) => Err(Error::Corpus {
                line,
                msg: e.to_string(),
            }),
            Ok(t) => serde_json::from_str(&t).map_err(|e| Error::Corpus {
                line,
                msg: e.to_string(),
            }),
        })
    }
}

/// Reads and checks the manifest, then every episode.
pub fn read_corpus(path: &Path) -> Result<(CorpusManifest, Vec<Episode>)> {
    let manifest = read_manifest(path)?;
    let episodes: Vec<Episode> = CorpusReader::open(path)?.collect::<Result<_>>()?;
    if episodes.len() != manifest.n_episodes {
        return Err(Error::Corpus {
            line: episodes.len() + 1,
            msg: format!(
                "manifest lists {} episodes, file has {}",
                manifest.n_episodes,
                episodes.len()
            ),
        });
    }
    for (k, e) in episodes.iter().enumerate() {
        if e.index != k as u64 {
            return Err(Error::Corpus {
                line: k + 1,
                msg: format!("episode index {} out of order", e.index),
            });
        }
    }
    Ok((manifest, episodes))
}
