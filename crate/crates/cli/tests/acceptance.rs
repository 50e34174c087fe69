// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero on any failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use latentscope::audit::stats::paired_t_test;
use latentscope::audit::{fldd, logitdiff, PairedDelta};
use latentscope::container::TensorFile;
use latentscope::intervene::{
    apply_steering, latent_effect, splice, steer_vector, zero_ablate, AblationMode, Metric, PositionScope, SpliceMode,
    ZmaxPolicy,
};
use latentscope::probe::auroc;
use latentscope::runtime::{AnswerCoupling, TokenInjection};
use latentscope::sae::{reconstruction_r2, train, SaeTrainConfig};
use latentscope::tensor::{cosine, dot};
use latentscope::{
    build_planted_model, build_random_model, AblationSpec, Activation, Edit, HookPoint, LatentVector, Matrix, Model,
    ModelConfig, PlantedModelSpec, Precision, ResidualActivations, SaeModel, SteerSpec, TokenSequence,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use statrs::distribution::{ContinuousCDF, StudentsT};

const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");

fn main() {
    let criteria: [(&str, &str, fn() -> Result<String>, Duration); 9] = [
        ("AC1", "formula oracles", ac1_formulas, Duration::from_secs(1)),
        ("AC2", "effect exactness", ac2_effect, Duration::from_secs(30)),
        ("AC3", "no-op exactness", ac3_noops, Duration::MAX),
        ("AC4", "planted causality", ac4_planted_steering, Duration::MAX),
        ("AC5", "probe recovery", ac5_probe_recovery, Duration::from_secs(300)),
        ("AC6", "end-to-end audit", ac6_audit, Duration::from_secs(600)),
        ("AC7", "SAE training", ac7_sae, Duration::MAX),
        ("AC8", "statistics", ac8_statistics, Duration::MAX),
        ("AC9", "determinism", ac9_determinism, Duration::MAX),
    ];
    let mut failed = 0;
    for (id, name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err(anyhow!("panicked")));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(anyhow!("{detail}; over the {:.0?} budget", budget)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail} ({:.2} s)", elapsed.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("FAIL {id} {name}: {e:#} ({:.2} s)", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn bit_identical(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape() && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn small_config(vocab: usize, d: usize, layers: usize, heads: usize, max_seq: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        d_mlp: 2 * d,
        max_seq,
        numeric_precision: Precision::Fp64,
    }
}

/// ReLU SAE with uniform random weights; latents in `dead` can never fire.
fn random_sae(d: usize, width: usize, dead: &[usize], rng: &mut ChaCha8Rng) -> SaeModel {
    let scale = 1.0 / (d as f64).sqrt();
    let mut enc = Matrix::zeros(width, d);
    let mut dec = Matrix::zeros(d, width);
    for j in 0..width {
        for i in 0..d {
            enc.set(j, i, rng.random_range(-1.0..1.0) * scale);
            dec.set(i, j, rng.random_range(-1.0..1.0) * scale);
        }
    }
    let enc_bias = (0..width)
        .map(|j| if dead.contains(&j) { -1e6 } else { rng.random_range(-0.3..0.3) })
        .collect();
    let dec_bias = (0..d).map(|_| rng.random_range(-0.1..0.1)).collect();
    SaeModel::new(enc, enc_bias, dec, dec_bias, Activation::Relu).expect("valid random SAE")
}

fn random_tokens(len: usize, vocab: usize, rng: &mut ChaCha8Rng) -> TokenSequence {
    TokenSequence((0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
}

// ---------------------------------------------------------------------------
// AC1

fn ac1_formulas() -> Result<String> {
    let mut cases = 0;

    // (z, r, alpha, z_max, expected)
    let steer: [(&[f64], usize, f64, f64, &[f64]); 11] = [
        (&[0.0, 0.0, 0.0], 0, 1.0, 2.0, &[2.0, 0.0, 0.0]),
        (&[1.0, 2.0, 3.0], 2, 0.5, 4.0, &[1.0, 2.0, 5.0]),
        (&[1.0, 2.0, 3.0], 1, 0.0, 9.0, &[1.0, 2.0, 3.0]),
        (&[0.5, 0.25], 0, -1.0, 0.5, &[0.0, 0.25]),
        (&[0.5, 0.25], 1, -0.5, 0.5, &[0.5, 0.0]),
        (&[3.0], 0, 0.01, 3.0, &[3.03]),
        (&[0.0, 7.0, 0.0, 1.0], 3, 5.0, 7.0, &[0.0, 7.0, 0.0, 36.0]),
        (&[0.2, 0.4, 0.6], 0, 0.1, 0.6, &[0.26, 0.4, 0.6]),
        (&[1.5, 0.0], 1, 2.0, 0.0, &[1.5, 0.0]),
        (&[0.0, 0.0, 2.5, 0.0], 2, -1.0, 2.5, &[0.0, 0.0, 0.0, 0.0]),
        (&[10.0, 20.0], 0, 1.5, 20.0, &[40.0, 20.0]),
    ];
    for (z, r, alpha, z_max, expected) in steer {
        let out = steer_vector(&LatentVector::new(z.to_vec())?, r, alpha, z_max)?;
        for (got, want) in out.values().iter().zip(expected) {
            ensure!(close(*got, *want, 1e-9), "steer_vector({z:?}, {r}, {alpha}, {z_max}) gave {:?}", out.values());
        }
        cases += 1;
    }
    ensure!(steer_vector(&LatentVector::new(vec![1.0])?, 1, 1.0, 1.0).is_err(), "out-of-range latent accepted");

    // (logits, yes, no, expected)
    let ld: [(&[f64], u32, u32, f64); 10] = [
        (&[0.0, 2.0, 1.0], 1, 2, 1.0),
        (&[0.0, -1.0, 3.0], 1, 2, -4.0),
        (&[5.0, 5.0], 0, 1, 0.0),
        (&[0.1, 0.2, 0.3, 0.4], 3, 0, 0.3),
        (&[-2.5, 1.5], 1, 0, 4.0),
        (&[-2.5, 1.5], 0, 1, -4.0),
        (&[1e3, -1e3], 0, 1, 2e3),
        (&[0.0, 0.0, 7.25], 2, 0, 7.25),
        (&[1.0, 2.0, 4.0, 8.0], 1, 3, -6.0),
        (&[0.3, 0.3, 0.3], 2, 2, 0.0),
    ];
    for (logits, yes, no, expected) in ld {
        let got = logitdiff(logits, yes, no)?;
        ensure!(close(got, expected, 1e-9), "logitdiff({logits:?}, {yes}, {no}) = {got}, want {expected}");
        cases += 1;
    }
    ensure!(logitdiff(&[0.0], 0, 3).is_err(), "out-of-vocabulary answer token accepted");

    // (logits_b, logits_a, expected delta) with yes = 1, no = 2
    let delta: [(&[f64], &[f64], f64); 10] = [
        (&[0.0, 2.0, 1.0], &[0.0, 1.0, 1.0], 1.0),
        (&[0.0, 1.0, 1.0], &[0.0, 2.0, 1.0], -1.0),
        (&[9.0, 3.0, 3.0], &[0.0, 3.0, 3.0], 0.0),
        (&[0.0, 0.5, -0.5], &[0.0, -0.5, 0.5], 2.0),
        (&[0.0, 4.0, 0.0], &[0.0, 0.0, 4.0], 8.0),
        (&[1.0, 1.25, 1.0], &[1.0, 1.0, 1.0], 0.25),
        (&[0.0, -3.0, 0.0], &[0.0, -1.0, 0.0], -2.0),
        (&[0.0, 0.1, 0.2], &[0.0, 0.3, 0.1], -0.3),
        (&[0.0, 10.0, 5.0], &[0.0, 6.0, 2.0], 1.0),
        (&[0.0, 2.0, 2.0], &[0.0, 2.0, 2.0], 0.0),
    ];
    let mut lds = Vec::new();
    for (b, a, expected) in delta {
        let pair = (logitdiff(b, 1, 2)?, logitdiff(a, 1, 2)?);
        let got = PairedDelta::from_logitdiffs(&[pair])?.mean;
        ensure!(close(got, expected, 1e-9), "delta for {b:?} vs {a:?} = {got}, want {expected}");
        lds.push(pair);
        cases += 1;
    }
    // mean over all ten pairs: (1 - 1 + 0 + 2 + 8 + 0.25 - 2 - 0.3 + 1 + 0) / 10
    let mean = PairedDelta::from_logitdiffs(&lds)?.mean;
    ensure!(close(mean, 0.895, 1e-9), "mean delta {mean}, want 0.895");

    // (clean, ablated, expected)
    let fl: [(f64, f64, f64); 11] = [
        (2.0, 1.0, 0.5),
        (2.0, 2.0, 0.0),
        (2.0, 0.0, 1.0),
        (2.0, -2.0, 2.0),
        (-4.0, -1.0, 0.75),
        (-4.0, 4.0, 2.0),
        (1.0, 1.5, -0.5),
        (0.5, 0.49, 0.02),
        (10.0, 9.92, 0.008),
        (-0.2, -0.3, -0.5),
        (3.0, 1.0, 2.0 / 3.0),
    ];
    for (clean, ablated, expected) in fl {
        let got = fldd(clean, ablated, 1e-9)?;
        ensure!(close(got, expected, 1e-9), "fldd({clean}, {ablated}) = {got}, want {expected}");
        cases += 1;
    }
    ensure!(fldd(0.0, 1.0, 1e-9).is_err() && fldd(1e-12, 1.0, 1e-9).is_err(), "near-zero clean accepted");
    Ok(format!("{cases} hand cases within 1e-9"))
}

// ---------------------------------------------------------------------------
// AC2

/// Mean over inputs of the summed per-position ablation differences, computed
/// by zeroing `z_j` through `h_t − z_j · d_j` at one position per forward.
fn brute_force_effect(model: &Model, sae: &SaeModel, hook: HookPoint, data: &[TokenSequence], j: usize) -> Result<f64> {
    let metric = |l: &Matrix| {
        let r = l.row(l.rows() - 1);
        r[1] - r[2]
    };
    let col = sae.decoder_column(j);
    let mut total = 0.0;
    for x in data {
        let clean = metric(&model.forward(x)?);
        let h = model.capture(x, hook)?;
        let mut sum = 0.0;
        for t in 0..x.len() {
            let z = (dot(sae.enc_weight().row(j), h.row(t)) + sae.enc_bias()[j]).max(0.0);
            let col = &col;
            let edit = move |acts: &ResidualActivations| -> latentscope::Result<ResidualActivations> {
                let mut out = acts.clone();
                for (o, c) in out.row_mut(t).iter_mut().zip(col) {
                    *o -= z * c;
                }
                Ok(out)
            };
            let ablated = metric(&model.forward_with_intervention(x, &[Edit::new(hook, &edit)])?);
            sum += ablated - clean;
        }
        total += sum;
    }
    Ok(total / data.len() as f64)
}

fn ac2_effect() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut compared = 0;
    let mut max_err: f64 = 0.0;
    for seed in 0..3 {
        let model = build_random_model(&small_config(12, 8, 2, 2, 8), seed)?;
        for width in [4, 9, 16] {
            let sae = random_sae(8, width, &[], &mut rng);
            let data: Vec<TokenSequence> = (1..=6).flat_map(|len| (0..2).map(move |_| len)).map(|len| random_tokens(len, 12, &mut rng)).collect();
            for hook in [HookPoint::pre(0), HookPoint::pre(1), HookPoint::post(1)] {
                let latents: Vec<usize> = (0..width).collect();
                let fast = latent_effect(&model, &sae, hook, &data, &latents, Metric::LogitDiff { yes: 1, no: 2 })?;
                for &j in &latents {
                    let want = brute_force_effect(&model, &sae, hook, &data, j)?;
                    let got = fast.get(j).context("missing latent")?;
                    max_err = max_err.max((got - want).abs());
                    ensure!(close(got, want, 1e-9), "seed {seed} width {width} {hook} latent {j}: {got} vs {want}");
                    compared += 1;
                }
            }
        }
    }
    Ok(format!("{compared} latent effects match brute force, max error {max_err:.1e}"))
}

// ---------------------------------------------------------------------------
// AC3

fn ac3_noops() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..100u64 {
        let layers = 1 + (seed % 3) as usize;
        let (d, heads) = [(4, 1), (8, 2), (12, 3)][(seed % 3) as usize];
        let model = build_random_model(&small_config(10, d, layers, heads, 10), seed)?;
        let width = rng.random_range(3..12);
        let dead = width - 1;
        let sae = random_sae(d, width, &[dead], &mut rng);
        let hook = if rng.random::<bool>() {
            HookPoint::pre(rng.random_range(0..=layers))
        } else {
            HookPoint::post(rng.random_range(0..layers))
        };
        let tokens = random_tokens(rng.random_range(1..=8), 10, &mut rng);
        let clean = model.forward(&tokens)?;

        let identity = |acts: &ResidualActivations| splice(&sae, acts, SpliceMode::ErrorPreserving, |_, z| Ok(z.clone()));
        let out = model.forward_with_intervention(&tokens, &[Edit::new(hook, &identity)])?;
        ensure!(bit_identical(&out, &clean), "model {seed}: identity splice changed logits");

        for positions in [PositionScope::All, PositionScope::PromptOnly] {
            let spec = SteerSpec {
                hook,
                latent_id: rng.random_range(0..width),
                alpha: 0.0,
                zmax_policy: ZmaxPolicy::PerInputGlobalMax,
                splice: SpliceMode::ErrorPreserving,
                positions,
            };
            ensure!(bit_identical(&apply_steering(&model, &sae, &tokens, &spec)?, &clean), "model {seed}: alpha = 0 steering changed logits");
        }

        let codes = sae.encode_rows(&model.capture(&tokens, hook)?)?;
        let inactive: BTreeSet<usize> = (0..width).filter(|&j| codes.column(j).iter().all(|v| *v == 0.0)).collect();
        ensure!(inactive.contains(&dead), "model {seed}: dead latent fired");
        let spec = AblationSpec { hooks: vec![hook], latent_ids: inactive, mode: AblationMode::Zero, splice: SpliceMode::ErrorPreserving };
        ensure!(bit_identical(&zero_ablate(&model, &sae, &tokens, &spec)?, &clean), "model {seed}: inactive ablation changed logits");
    }
    Ok("identity splice, alpha = 0 steering and inactive ablation bit-exact on 100 random models".into())
}

// ---------------------------------------------------------------------------
// AC4

fn ac4_planted_steering() -> Result<String> {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut u = vec![0.0; d];
    u[2] = 1.0;
    let mut checked = 0;
    let mut max_err: f64 = 0.0;
    for (k, beta) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let mut spec = PlantedModelSpec::default();
        spec.concept_directions.insert("c".into(), u.clone());
        spec.token_injections.insert(4, TokenInjection { concept: "c".into(), magnitude: 1.5, base_token: Some(0) });
        spec.answer_couplings.push(AnswerCoupling { concept: "c".into(), answer_token: 1, strength: beta });
        let model = build_planted_model(&small_config(10, d, 2, 2, 12), &spec, 40 + k as u64)?;
        // latent 0 reads and writes the concept axis; the rest are random
        let mut sae = random_sae(d, 6, &[], &mut rng);
        let mut enc = sae.enc_weight().clone();
        let mut dec = sae.dec_weight().clone();
        for i in 0..d {
            enc.set(0, i, u[i]);
            dec.set(i, 0, u[i]);
        }
        let mut enc_bias = sae.enc_bias().to_vec();
        enc_bias[0] = 0.0;
        sae = SaeModel::new(enc, enc_bias, dec, sae.dec_bias().to_vec(), Activation::Relu)?;

        for hook in [HookPoint::pre(0), HookPoint::pre(1), HookPoint::pre(2)] {
            for _ in 0..3 {
                let mut tokens = random_tokens(rng.random_range(2..=8), 10, &mut rng);
                tokens.0[0] = 4;
                let clean = model.forward(&tokens)?;
                let z_max = sae.encode_rows(&model.capture(&tokens, hook)?)?.max_abs();
                let last = tokens.len() - 1;
                let mut previous = f64::NEG_INFINITY;
                for step in 0..10 {
                    let alpha = 0.25 * f64::from(step);
                    let spec = SteerSpec {
                        hook,
                        latent_id: 0,
                        alpha,
                        zmax_policy: ZmaxPolicy::PerInputGlobalMax,
                        splice: SpliceMode::ErrorPreserving,
                        positions: PositionScope::All,
                    };
                    let steered = apply_steering(&model, &sae, &tokens, &spec)?;
                    let shift = steered.get(last, 1) - clean.get(last, 1);
                    let want = beta * alpha * z_max;
                    max_err = max_err.max((shift - want).abs());
                    ensure!(close(shift, want, 1e-6), "beta {beta} {hook} alpha {alpha}: shift {shift}, want {want}");
                    ensure!(steered.get(last, 1) > previous, "yes logit not increasing at alpha {alpha}");
                    previous = steered.get(last, 1);
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} steered forwards, shift = beta * alpha * z_max within {max_err:.1e}, strictly monotone over 10-point grids"))
}

// ---------------------------------------------------------------------------
// CLI helpers shared by AC5, AC6 and AC9

fn cli(args: &[&str]) -> Result<latentscope_cli::Outcome> {
    let mut full = vec!["latentscope"];
    full.extend_from_slice(args);
    latentscope_cli::run_from_args(full).with_context(|| format!("latentscope {}", args.join(" ")))
}

fn config(set: &str, command: &str) -> String {
    format!("{CONFIGS}/{set}/{}.toml", command.replace('-', "_"))
}

fn run_stage(set: &str, command: &str, out: &Path, extra: &[&str]) -> Result<latentscope_cli::Outcome> {
    let cfg = config(set, command);
    let out = out.to_str().context("non-UTF-8 path")?;
    let mut args = vec!["--config", cfg.as_str(), "--out-dir", out];
    args.extend_from_slice(extra);
    args.push(command);
    cli(&args)
}

fn read_json(path: impl AsRef<Path>) -> Result<Value> {
    let path = path.as_ref();
    serde_json::from_str(&std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
        .with_context(|| format!("parsing {}", path.display()))
}

fn num(v: &Value) -> Result<f64> {
    match v {
        Value::Number(n) => n.as_f64().context("number"),
        Value::String(s) => match s.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            _ => bail!("not a number: {s}"),
        },
        _ => bail!("not a number: {v}"),
    }
}

/// Latent whose decoder column is most aligned with `concept`, recomputed from the artifacts.
fn max_cosine_latent(dir: &Path, concept: &str) -> Result<(usize, f64)> {
    let sae = SaeModel::from_container(TensorFile::from_bytes(&std::fs::read(dir.join("sae.lsc"))?)?)?;
    let fixture = read_json(dir.join("fixture.json"))?;
    let u: Vec<f64> = fixture["concept_directions"][concept]
        .as_array()
        .context("concept direction")?
        .iter()
        .map(num)
        .collect::<Result<_>>()?;
    Ok((0..sae.width())
        .map(|j| (j, cosine(&sae.decoder_column(j), &u)))
        .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best }))
}

fn before_arm(report: &Value) -> Result<(f64, f64)> {
    let arm = report["arms"]
        .as_array()
        .context("arms")?
        .iter()
        .find(|a| a["arm"] == "before")
        .context("before arm")?;
    Ok((num(&arm["delta"]["mean"])?, num(&arm["delta"]["test"]["p_value"])?))
}

// ---------------------------------------------------------------------------
// AC5

fn ac5_probe_recovery() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let base = tmp.path().join("base");
    run_stage("planted_bias", "gen-corpus", &base, &[])?;
    run_stage("planted_bias", "train-sae", &base, &[])?;
    let probe_cfg = tmp.path().join("probe_a.toml");
    std::fs::write(&probe_cfg, std::fs::read_to_string(config("planted_bias", "probe"))?.replace("\"B\"", "\"A\""))?;
    let out = tmp.path().join("probe_a");
    cli(&[
        "--config",
        probe_cfg.to_str().context("path")?,
        "--in-dir",
        base.to_str().context("path")?,
        "--out-dir",
        out.to_str().context("path")?,
        "probe",
    ])?;
    let report = read_json(out.join("probe_report.json"))?;
    ensure!(report["positive_group"] == "A", "probe did not use label A");
    let ranking = std::fs::read_to_string(out.join("ranking.csv"))?;
    let top: usize = ranking.lines().nth(1).and_then(|l| l.split(',').next()).context("empty ranking")?.parse()?;
    let (aligned, cos) = max_cosine_latent(&base, "group_a")?;
    ensure!(top == aligned, "top probe latent {top}, max-cosine latent {aligned}");
    let top_auroc = num(&report["top_latents"][0]["test_auroc"])?;
    ensure!(top_auroc >= 0.9, "single-latent test AUROC {top_auroc}");
    Ok(format!("top latent {top} is the max-cosine latent (cos {cos:.3}), single-latent test AUROC {top_auroc:.3}"))
}

// ---------------------------------------------------------------------------
// AC6

fn ac6_audit() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let bias = tmp.path().join("planted_bias");
    for command in ["gen-corpus", "train-sae", "probe", "interp", "steer", "ablate", "effect", "audit"] {
        run_stage("planted_bias", command, &bias, &[])?;
    }
    let report = read_json(bias.join("report.json"))?;
    let (mean, p) = before_arm(&report)?;
    ensure!(mean > 0.0 && p < 0.05, "before arm mean {mean}, p {p}");
    let reduction = num(&report["abs_mean_reduction"])?;
    ensure!(reduction >= 0.5, "ablation reduced |mean delta| by only {reduction}");
    let ablated: Vec<u64> = report["intervention"]["latent_ids"]
        .as_array()
        .context("latent_ids")?
        .iter()
        .filter_map(Value::as_u64)
        .collect();
    let (planted, cos) = max_cosine_latent(&bias, "group_b")?;
    ensure!(ablated == [planted as u64], "ablated {ablated:?}, planted latent {planted}");

    let null = tmp.path().join("null");
    for command in ["gen-corpus", "train-sae", "probe"] {
        run_stage("null", command, &null, &[])?;
    }
    let mut accepted = 0;
    let mut p_values = Vec::new();
    for seed in 0..20 {
        let s = seed.to_string();
        run_stage("null", "audit", &null, &["--seed", &s])?;
        let (_, p) = before_arm(&read_json(null.join("report.json"))?)?;
        if p >= 0.05 {
            accepted += 1;
        }
        p_values.push(p);
    }
    ensure!(accepted >= 18, "null fixture kept H0 in only {accepted}/20 runs: {p_values:?}");
    let min_p = p_values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "planted: mean delta {mean:.3} (p {p:.1e}), ablating latent {planted} (cos {cos:.3}) cuts |mean| by {:.1}%; null: p >= 0.05 in {accepted}/20 runs (min p {min_p:.3})",
        100.0 * reduction
    ))
}

// ---------------------------------------------------------------------------
// AC7

fn rank4_data(rng: &mut ChaCha8Rng) -> Matrix {
    let (d, k, m, p) = (16, 4, 4000, 0.25);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    while dirs.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &dirs {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        dirs.push(v.into_iter().map(|x| x / n).collect());
    }
    let mut data = Matrix::zeros(m, d);
    for r in 0..m {
        for u in &dirs {
            if rng.random::<f64>() < p {
                let c = rng.random_range(0.5..1.5);
                data.row_mut(r).iter_mut().zip(u).for_each(|(x, y)| *x += c * y);
            }
        }
        for x in data.row_mut(r) {
            *x += 0.01 * rng.random_range(-1.0..1.0);
        }
    }
    data
}

fn gradient_check() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let (d, w, lambda, h) = (5, 6, 0.1, 1e-6);
    let sae = random_sae(d, w, &[], &mut rng);
    let batch = Matrix::from_rows(&(0..7).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>())?;
    // keep every pre-activation away from the ReLU kink
    for x in batch.row_iter() {
        for j in 0..w {
            let pre = dot(sae.enc_weight().row(j), x) + sae.enc_bias()[j];
            ensure!(pre.abs() > 1e-3, "pre-activation {pre} too close to the kink");
        }
    }
    let (_, grads) = sae.loss_and_gradients(&batch, lambda)?;
    let loss_with = |edit: &dyn Fn(&mut Matrix, &mut Vec<f64>, &mut Matrix, &mut Vec<f64>)| -> Result<f64> {
        let (mut ew, mut eb, mut dw, mut db) =
            (sae.enc_weight().clone(), sae.enc_bias().to_vec(), sae.dec_weight().clone(), sae.dec_bias().to_vec());
        edit(&mut ew, &mut eb, &mut dw, &mut db);
        Ok(SaeModel::new(ew, eb, dw, db, Activation::Relu)?.loss_and_gradients(&batch, lambda)?.0)
    };
    let mut worst: f64 = 0.0;
    let mut compare = |analytic: f64, plus: f64, minus: f64, what: String| -> Result<()> {
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
        ensure!(rel <= 1e-4, "{what}: analytic {analytic}, numeric {numeric}");
        Ok(())
    };
    for j in 0..w {
        for i in 0..d {
            let p = loss_with(&|ew, _, _, _| ew.set(j, i, ew.get(j, i) + h))?;
            let m = loss_with(&|ew, _, _, _| ew.set(j, i, ew.get(j, i) - h))?;
            compare(grads.enc_weight.get(j, i), p, m, format!("enc_weight[{j},{i}]"))?;
            let p = loss_with(&|_, _, dw, _| dw.set(i, j, dw.get(i, j) + h))?;
            let m = loss_with(&|_, _, dw, _| dw.set(i, j, dw.get(i, j) - h))?;
            compare(grads.dec_weight.get(i, j), p, m, format!("dec_weight[{i},{j}]"))?;
        }
        let p = loss_with(&|_, eb, _, _| eb[j] += h)?;
        let m = loss_with(&|_, eb, _, _| eb[j] -= h)?;
        compare(grads.enc_bias[j], p, m, format!("enc_bias[{j}]"))?;
    }
    for i in 0..d {
        let p = loss_with(&|_, _, _, db| db[i] += h)?;
        let m = loss_with(&|_, _, _, db| db[i] -= h)?;
        compare(grads.dec_bias[i], p, m, format!("dec_bias[{i}]"))?;
    }
    Ok(worst)
}

fn ac7_sae() -> Result<String> {
    let data = rank4_data(&mut ChaCha8Rng::seed_from_u64(1));
    let cfg = SaeTrainConfig { sparsity_weight: 0.1, learning_rate: 0.05, steps: 5000, batch_size: 64, seed: 3 };
    let (sae, stats) = train(&cfg, 64, &data)?;
    let r2 = reconstruction_r2(&sae, &data)?;
    ensure!(r2 >= 0.9, "R^2 {r2}");
    ensure!(stats.mean_l0 <= 8.0, "mean L0 {}", stats.mean_l0);
    let worst = gradient_check()?;
    Ok(format!("R^2 {r2:.4}, mean L0 {:.2}; gradients match finite differences (worst relative error {worst:.1e})", stats.mean_l0))
}

// ---------------------------------------------------------------------------
// AC8

fn ac8_statistics() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut max_err: f64 = 0.0;
    let mut tests = 0;
    for n in [2usize, 5, 30] {
        for _ in 0..20 {
            let shift = rng.random_range(-1.0..1.0);
            let deltas: Vec<f64> = (0..n).map(|_| shift + rng.random_range(-1.0..1.0)).collect();
            let t = paired_t_test(&deltas).context("t-test")?;
            let stat = t.t_stat.context("t statistic")?;
            let reference = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, (n - 1) as f64)?.cdf(stat.abs()));
            let p = t.p_value.context("p-value")?;
            max_err = max_err.max((p - reference).abs());
            ensure!(close(p, reference, 1e-6), "n {n}: p {p}, reference {reference}");
            tests += 1;
        }
    }
    let mut sets = 0;
    while sets < 50 {
        let n = rng.random_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..12)) / 4.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let (pos, neg) = (labels.iter().filter(|l| **l).count(), labels.iter().filter(|l| !**l).count());
        if pos == 0 || neg == 0 {
            ensure!(auroc(&scores, &labels).is_err(), "single-class AUROC accepted");
            continue;
        }
        let mut twice = 0u64;
        for (sp, _) in scores.iter().zip(&labels).filter(|(_, l)| **l) {
            for (sn, _) in scores.iter().zip(&labels).filter(|(_, l)| !**l) {
                twice += if sp > sn { 2 } else { u64::from(sp == sn) };
            }
        }
        let brute = twice as f64 / (2 * pos * neg) as f64;
        let got = auroc(&scores, &labels)?;
        ensure!(got == brute, "AUROC {got}, brute force {brute}");
        sets += 1;
    }
    Ok(format!("{tests} t-tests within {max_err:.1e} of the reference t-CDF; AUROC exact on {sets} tied score sets"))
}

// ---------------------------------------------------------------------------
// AC9

fn run_binary(out: &Path) -> Result<()> {
    for command in ["gen-corpus", "train-sae", "probe", "interp", "steer", "ablate", "effect", "audit"] {
        let status = Command::new(env!("CARGO_BIN_EXE_latentscope"))
            .args(["--config", &config("planted_bias", command), "--out-dir"])
            .arg(out)
            .arg(command)
            .env_remove("SOURCE_DATE_EPOCH")
            .stdout(std::process::Stdio::null())
            .status()?;
        ensure!(status.success(), "{command} exited with {status}");
    }
    Ok(())
}

fn listing(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| PathBuf::from(e.file_name())))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    Ok(names)
}

fn ac9_determinism() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_binary(&a)?;
    run_binary(&b)?;
    let names = listing(&a)?;
    ensure!(names == listing(&b)?, "runs wrote different file sets");
    let mut svgs = 0;
    for name in &names {
        ensure!(std::fs::read(a.join(name))? == std::fs::read(b.join(name))?, "{} differs between runs", name.display());
        svgs += usize::from(name.extension().is_some_and(|e| e == "svg"));
    }
    Ok(format!("{} files from 8 commands byte-identical across two runs ({svgs} SVG charts)", names.len()))
}
