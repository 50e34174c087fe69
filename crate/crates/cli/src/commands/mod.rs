// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand implementations and the artifact plumbing they share.

mod audit;
mod intervene;
mod pipeline;

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use latentscope::audit::AnswerTokens;
use latentscope::container::TensorFile;
use latentscope::corpus::read_corpus;
use latentscope::fixture::FixtureSpec;
use latentscope::{HookPoint, Model, NoteRecord, SaeModel, TokenSequence, VocabLayout, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, Seeded, Slot};
use crate::manifest::{source_date_epoch, Inputs, Outputs, RunManifest, TOOL_VERSION};
use crate::{CommonArgs, Command, Outcome};

pub const MODEL_FILE: &str = "model.lsc";
pub const VOCAB_FILE: &str = "vocab.json";
pub const FIXTURE_FILE: &str = "fixture.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const SAE_FILE: &str = "sae.lsc";
pub const RANKING_FILE: &str = "ranking.csv";

/// Planted ground truth written next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureInfo {
    pub spec: FixtureSpec,
    pub layout: VocabLayout,
    pub answer: AnswerTokens,
    pub concept_directions: BTreeMap<String, Vec<f64>>,
}

pub fn dispatch(command: Command, common: &CommonArgs) -> Result<Outcome> {
    match command {
        Command::GenCorpus => pipeline::gen_corpus(Ctx::new(common, command)?),
        Command::TrainSae => pipeline::train_sae(Ctx::new(common, command)?),
        Command::Probe => pipeline::probe(Ctx::new(common, command)?),
        Command::Interp => pipeline::interp(Ctx::new(common, command)?),
        Command::Steer => intervene::steer(Ctx::new(common, command)?),
        Command::Ablate => intervene::ablate(Ctx::new(common, command)?),
        Command::Effect => intervene::effect(Ctx::new(common, command)?),
        Command::Audit => audit::audit(Ctx::new(common, command)?),
    }
}

/// Per-run state: flags, digested inputs and staged outputs.
pub struct Ctx<'a> {
    pub common: &'a CommonArgs,
    pub command: Command,
    pub inputs: Inputs,
    pub outputs: Outputs,
}

impl<'a> Ctx<'a> {
    fn new(common: &'a CommonArgs, command: Command) -> Result<Self> {
        let in_dir: PathBuf = common.in_dir.clone().unwrap_or_else(|| common.out_dir.clone());
        Ok(Self {
            common,
            command,
            inputs: Inputs::new(in_dir),
            outputs: Outputs::default(),
        })
    }

    /// The effective config: file values, then `--seed`.
    pub fn config<T: serde::de::DeserializeOwned + Default + Seeded>(&self) -> Result<T> {
        let mut cfg: T = config::load(self.common.config.as_deref()).context("stage `config`")?;
        if let Some(seed) = self.common.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    pub fn model(&mut self) -> Result<Model> {
        let bytes = self.inputs.read(MODEL_FILE)?;
        let model = Model::from_container(TensorFile::from_bytes(&bytes)?).context("loading model")?;
        Ok(match self.common.precision {
            Some(p) => model.with_precision(p.into()),
            None => model,
        })
    }

    pub fn sae(&mut self) -> Result<SaeModel> {
        let bytes = self.inputs.read(SAE_FILE)?;
        SaeModel::from_container(TensorFile::from_bytes(&bytes)?).context("loading SAE")
    }

    pub fn corpus(&mut self) -> Result<Vec<NoteRecord>> {
        let bytes = self.inputs.read(CORPUS_FILE)?;
        read_corpus(bytes.as_slice()).context("loading corpus")
    }

    pub fn vocab(&mut self) -> Result<Vocabulary> {
        Vocabulary::from_json(&self.inputs.read_string(VOCAB_FILE)?).context("loading vocabulary")
    }

    pub fn fixture(&mut self) -> Result<FixtureInfo> {
        serde_json::from_str(&self.inputs.read_string(FIXTURE_FILE)?).context("loading fixture description")
    }

    /// The first `k` latent ids of the probe ranking.
    pub fn ranked_latents(&mut self, k: usize) -> Result<Vec<usize>> {
        let text = self.inputs.read_string(RANKING_FILE)?;
        let ids: Vec<usize> = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .next()
                    .and_then(|id| id.trim().parse().ok())
                    .ok_or_else(|| anyhow!("malformed ranking row `{l}`"))
            })
            .take(k)
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            bail!("{RANKING_FILE} has no rows");
        }
        Ok(ids)
    }

    /// Write outputs plus a manifest echoing the effective config.
    pub fn finish<C: Serialize>(self, config: &C, seeds: serde_json::Value, degeneracy_flags: Vec<String>) -> Result<Outcome> {
        let config = serde_json::to_value(config)?;
        let manifest = RunManifest {
            command: self.command.name().to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_sha256: crate::manifest::sha256_hex(&serde_json::to_vec(&config)?),
            config,
            seeds,
            precision: self.common.precision.map(|p| format!("{p:?}").to_lowercase()),
            jobs: self.common.jobs,
            inputs: self.inputs.digests(),
            artifacts: self.outputs.digests(),
            timestamp: source_date_epoch(),
        };
        let written = self
            .outputs
            .commit(&self.common.out_dir, &manifest)
            .context("stage `write`")?;
        Ok(Outcome {
            written,
            degeneracy_flags,
        })
    }
}

pub fn parse_hook(s: &str) -> Result<HookPoint> {
    s.parse().with_context(|| format!("invalid hook `{s}`"))
}

/// `n` notes chosen by a seeded shuffle, in doc-id order, each cut to
/// `context_len` tokens and optionally followed by a random marker of `slot`.
pub fn sample_prompts(
    records: &[NoteRecord],
    layout: &VocabLayout,
    n: usize,
    context_len: usize,
    slot: Slot,
    seed: u64,
) -> Result<Vec<(u64, TokenSequence)>> {
    if n == 0 || n > records.len() {
        bail!("need between 1 and {} prompts, got {n}", records.len());
    }
    if context_len == 0 {
        bail!("context_len must be >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx.sort_by_key(|&i| records[i].doc_id);
    Ok(idx
        .into_iter()
        .map(|i| {
            let r = &records[i];
            let mut tokens = r.tokens.ids()[..context_len.min(r.tokens.len())].to_vec();
            let markers = match slot {
                Slot::None => &[][..],
                Slot::GroupA => &layout.group_a[..],
                Slot::GroupB => &layout.group_b[..],
            };
            if !markers.is_empty() {
                tokens.push(markers[rng.random_range(0..markers.len())]);
            }
            (r.doc_id, TokenSequence(tokens))
        })
        .collect())
}

pub(crate) fn csv_tokens(tokens: &TokenSequence) -> String {
    tokens.ids().iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}
