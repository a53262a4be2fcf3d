//! On-disk layout of an experiment directory: corpus manifest with
//! checksums, config echoes, n-best lists and score tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use jeit_core::corpus::{rare_word_report, AuditThresholds, RareWordReport, SplitBundle};
use jeit_core::decoding::{Hypothesis, WerBreakdown};
use jeit_core::models::TokenSequence;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const CONFIG_ECHO: &str = "config.toml";

pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

pub fn run_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join("runs").join(name)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Binds the corpus files to their checksums, the generating spec and the
/// audit outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub corpus: jeit_core::corpus::CorpusSpec,
    /// File name relative to the data directory → SHA-256.
    pub files: BTreeMap<String, String>,
    pub audit_passed: bool,
    pub audit_violations: Vec<String>,
    pub unpaired_to_paired_ratio: f64,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Audit(format!("no corpus manifest at {}: {e}", path.display())))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| CliError::Audit(format!("corrupted manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(CliError::Audit(format!("manifest version {} unsupported", m.version)));
        }
        Ok(m)
    }

    /// Re-hashes every listed file.
    pub fn verify(&self, dir: &Path) -> Result<(), CliError> {
        if self.files.is_empty() {
            return Err(CliError::Audit("manifest lists no files".into()));
        }
        for (name, want) in &self.files {
            let bytes = fs::read(dir.join(name)).map_err(|e| CliError::Audit(format!("{name}: {e}")))?;
            if &sha256_hex(&bytes) != want {
                return Err(CliError::Audit(format!("{name} does not match its manifest checksum")));
            }
        }
        if !self.audit_passed {
            return Err(CliError::Audit(format!(
                "corpus failed its audits: {}",
                self.audit_violations.join("; ")
            )));
        }
        Ok(())
    }
}

/// Writes the corpus, audit table and manifest into `dir`.
pub fn write_corpus(dir: &Path, bundle: &SplitBundle, cfg: &RunConfig) -> Result<(Manifest, RareWordReport), CliError> {
    let files = bundle.save(dir)?;
    let report = rare_word_report(bundle, &AuditThresholds::from(&cfg.corpus));
    fs::write(dir.join("rare_words.tsv"), report.to_table())?;
    let mut sums = BTreeMap::new();
    for f in files.iter().chain(std::iter::once(&dir.join("rare_words.tsv"))) {
        let name = f.strip_prefix(dir).unwrap_or(f).to_string_lossy().replace('\\', "/");
        sums.insert(name, sha256_hex(&fs::read(f)?));
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: cfg.corpus.seed,
        corpus: cfg.corpus.clone(),
        files: sums,
        audit_passed: report.passed(),
        audit_violations: report.violations.clone(),
        unpaired_to_paired_ratio: report.unpaired_to_paired_ratio,
    };
    manifest.write(dir)?;
    Ok((manifest, report))
}

/// Loads a corpus after checking its manifest, checksums, audits and that
/// it was generated from the same spec as `cfg`.
pub fn load_corpus(cfg: &RunConfig) -> Result<SplitBundle, CliError> {
    let dir = data_dir(cfg);
    let m = Manifest::read(&dir)?;
    m.verify(&dir)?;
    if m.corpus != cfg.corpus {
        return Err(CliError::Config(format!(
            "corpus in {} was generated from a different spec; re-run gen-data",
            dir.display()
        )));
    }
    Ok(SplitBundle::load(&dir)?)
}

pub fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_ECHO), cfg.to_toml())?;
    Ok(())
}

/// One n-best entry as written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NbestRow {
    pub utt: String,
    pub rank: usize,
    pub fused: f64,
    pub e2e: f64,
    pub lm: f64,
    pub ilm: f64,
    pub tokens: String,
}

pub const NBEST_HEADER: &str = "utt\trank\tfused\te2e\tlm\tilm\ttokens";

pub fn nbest_rows(utt: &str, nbest: &[Hypothesis], render: impl Fn(&TokenSequence) -> String) -> Vec<NbestRow> {
    nbest
        .iter()
        .enumerate()
        .map(|(rank, h)| NbestRow {
            utt: utt.to_string(),
            rank,
            fused: h.fused_score,
            e2e: h.e2e_logscore,
            lm: h.lm_logscore,
            ilm: h.ilm_logscore,
            tokens: render(&h.tokens),
        })
        .collect()
}

pub fn write_nbest(path: &Path, rows: &[NbestRow]) -> Result<(), CliError> {
    let mut s = String::from(NBEST_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{}",
            r.utt, r.rank, r.fused, r.e2e, r.lm, r.ilm, r.tokens
        );
    }
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_nbest(path: &Path) -> Result<Vec<NbestRow>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(NBEST_HEADER) {
        return Err(CliError::Audit(format!("{} is not an n-best file", path.display())));
    }
    let bad = |l: &str| CliError::Audit(format!("malformed n-best line in {}: {l}", path.display()));
    lines
        .map(|l| {
            let f: Vec<&str> = l.splitn(7, '\t').collect();
            if f.len() != 7 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            Ok(NbestRow {
                utt: f[0].to_string(),
                rank: f[1].parse().map_err(|_| bad(l))?,
                fused: num(f[2])?,
                e2e: num(f[3])?,
                lm: num(f[4])?,
                ilm: num(f[5])?,
                tokens: f[6].to_string(),
            })
        })
        .collect()
}

/// Pooled WER per test set for one decoded system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub system: String,
    pub sets: BTreeMap<String, WerBreakdown>,
}

impl ScoreTable {
    pub fn rate(&self, set: &str) -> Option<f64> {
        self.sets.get(set).map(|w| w.rate())
    }

    /// Pooled over every set except `base` and `dev`.
    pub fn rare(&self) -> WerBreakdown {
        let mut w = WerBreakdown::default();
        for (k, v) in &self.sets {
            if k != "base" && k != "dev" {
                w.add(v);
            }
        }
        w
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, serde_json::to_string_pretty(self).expect("json") + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| CliError::Audit(format!("{}: {e}", path.display())))
    }
}
