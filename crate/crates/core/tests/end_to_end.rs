// SPDX-License-Identifier: MIT OR Apache-2.0

//! Public-API walks through the planted fixture: corpus, SAE, probe,
//! interventions and the audit, plus file round trips of every artifact.

use std::collections::{BTreeMap, BTreeSet};

use latentscope::audit::{build_pairs, delta_logitdiff, run_audit, AuditTask, Intervention, PairSpec, FLDD_EPSILON};
use latentscope::corpus::{generate_corpus, load_corpus, save_corpus, split, SplitSpec, ANTI_BIAS_QUESTION};
use latentscope::fixture::{build_fixture, Fixture, FixtureSpec, GROUP_A_CONCEPT, GROUP_B_CONCEPT};
use latentscope::intervene::{AblationMode, SpliceMode};
use latentscope::probe::{auroc, build_feature_matrix, fit_probe, top_latents};
use latentscope::sae::{activation_dataset, reconstruction_r2, train, SaeTrainConfig};
use latentscope::tensor::cosine;
use latentscope::{AblationSpec, CorpusSpec, Group, HookPoint, Model, NoteRecord, ProbeModel, SaeModel, Vocabulary};

struct Setup {
    fixture: Fixture,
    notes: Vec<NoteRecord>,
    sae: SaeModel,
}

fn setup(bias_strength: f64, correlation: f64) -> Setup {
    let fixture = build_fixture(&FixtureSpec { bias_strength, ..FixtureSpec::default() }).unwrap();
    let notes = generate_corpus(&CorpusSpec {
        n_docs: 600,
        doc_length_min: 12,
        doc_length_max: 20,
        layout: fixture.layout.clone(),
        marker_rate: 0.3,
        correlation,
        condition_rate: 0.5,
        seed: 21,
    })
    .unwrap();
    let tokens: Vec<_> = notes.iter().map(|n| n.tokens.clone()).collect();
    let data = activation_dataset(&fixture.model, HookPoint::pre(1), &tokens).unwrap();
    let cfg = SaeTrainConfig { sparsity_weight: 0.1, learning_rate: 0.02, steps: 2500, batch_size: 64, seed: 3 };
    let (sae, _) = train(&cfg, 64, &data).unwrap();
    assert!(reconstruction_r2(&sae, &data).unwrap() > 0.9);
    Setup { fixture, notes, sae }
}

fn best_aligned(sae: &SaeModel, u: &[f64]) -> usize {
    (0..sae.width())
        .max_by(|&a, &b| cosine(&sae.decoder_column(a), u).total_cmp(&cosine(&sae.decoder_column(b), u)))
        .unwrap()
}

#[test]
fn probe_finds_the_planted_group_latent_and_ablation_removes_the_bias() {
    let s = setup(1.0, 0.9);
    let hook = HookPoint::pre(1);
    let (train_set, test_set) = split(&s.notes, &SplitSpec { train_fraction: 0.8, seed: 2 }).unwrap();
    let docs = |ns: &[NoteRecord]| ns.iter().map(|n| (n.doc_id, n.tokens.clone())).collect::<Vec<_>>();
    let labels = |ns: &[NoteRecord]| ns.iter().map(|n| n.group == Group::A).collect::<Vec<_>>();
    let f_train = build_feature_matrix(&s.fixture.model, &s.sae, hook, &docs(&train_set)).unwrap();
    let f_test = build_feature_matrix(&s.fixture.model, &s.sae, hook, &docs(&test_set)).unwrap();
    let probe = fit_probe(&f_train, &labels(&train_set), 0.01, 2000, 1e-9, 2).unwrap();
    let top = top_latents(&probe, 1).unwrap()[0].0;
    assert_eq!(top, best_aligned(&s.sae, s.fixture.direction(GROUP_A_CONCEPT)));
    assert!(auroc(&f_test.latent(top), &labels(&test_set)).unwrap() >= 0.9);

    let planted = best_aligned(&s.sae, s.fixture.direction(GROUP_B_CONCEPT));
    let pairs = build_pairs(&s.notes, &s.fixture.layout, &PairSpec { n_pairs: 40, context_len: 12, seed: 5 }).unwrap();
    let rendered: Vec<_> = pairs.iter().map(|p| p.render(&[], &s.fixture.layout).unwrap()).collect();
    let spec = AblationSpec {
        hooks: vec![hook],
        latent_ids: BTreeSet::from([planted]),
        mode: AblationMode::Zero,
        splice: SpliceMode::ErrorPreserving,
    };
    let before = delta_logitdiff(&s.fixture.model, &rendered, s.fixture.answer, Intervention::None).unwrap();
    let after = delta_logitdiff(
        &s.fixture.model,
        &rendered,
        s.fixture.answer,
        Intervention::Ablate { sae: &s.sae, spec: &spec },
    )
    .unwrap();
    assert!(before.mean > 1.0 && before.p_value().unwrap() < 0.05);
    assert!(after.mean.abs() < 0.5 * before.mean.abs());
}

#[test]
fn audit_report_on_the_null_fixture_is_complete_and_unbiased() {
    let s = setup(0.0, 0.0);
    let vocab = &s.fixture.vocab;
    let task = AuditTask {
        name: "null".into(),
        condition: "cond_0".into(),
        model: &s.fixture.model,
        model_id: "null-model".into(),
        sae: &s.sae,
        sae_id: "null-sae".into(),
        layout: s.fixture.layout.clone(),
        pairs: build_pairs(&s.notes, &s.fixture.layout, &PairSpec { n_pairs: 60, context_len: 12, seed: 1 }).unwrap(),
        anti_bias_suffix: vocab.encode(ANTI_BIAS_QUESTION).unwrap().0,
        anti_bias_text: ANTI_BIAS_QUESTION.into(),
        answer: s.fixture.answer,
        ablation: AblationSpec {
            hooks: vec![HookPoint::pre(1)],
            latent_ids: BTreeSet::from([best_aligned(&s.sae, s.fixture.direction(GROUP_B_CONCEPT))]),
            mode: AblationMode::Zero,
            splice: SpliceMode::ErrorPreserving,
        },
        fldd_epsilon: FLDD_EPSILON,
        generation: None,
        seeds: BTreeMap::from([("pairs".to_string(), 1)]),
    };
    let report = run_audit(&task).unwrap();
    assert_eq!(report.arms.len(), 3);
    assert!(report.arm("before").unwrap().delta.p_value().unwrap() >= 0.05);
    let files = report.files().unwrap();
    assert_eq!(files.len(), 8);
    for (name, body) in &files {
        assert!(!body.is_empty(), "{name}");
        if name.ends_with(".svg") {
            assert!(body.starts_with("<svg") && body.trim_end().ends_with("</svg>"), "{name}");
        }
    }
    let tmp = tempfile::tempdir().unwrap();
    let written = report.write_dir(tmp.path()).unwrap();
    assert_eq!(written.len(), 8);
    assert_eq!(run_audit(&task).unwrap(), report);
}

#[test]
fn artifacts_round_trip_through_files() {
    let s = setup(1.0, 0.9);
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name);

    s.fixture.model.save(p("model.lsc")).unwrap();
    let model = Model::load(p("model.lsc")).unwrap();
    let tokens = &s.notes[0].tokens;
    assert_eq!(model.forward(tokens).unwrap(), s.fixture.model.forward(tokens).unwrap());

    s.sae.save(p("sae.lsc")).unwrap();
    assert_eq!(SaeModel::load(p("sae.lsc")).unwrap(), s.sae);

    save_corpus(&s.notes, p("corpus.jsonl")).unwrap();
    assert_eq!(load_corpus(p("corpus.jsonl")).unwrap(), s.notes);

    s.fixture.vocab.save(p("vocab.json")).unwrap();
    let vocab = Vocabulary::load(p("vocab.json")).unwrap();
    assert_eq!(vocab.decode(tokens), s.fixture.vocab.decode(tokens));

    let docs: Vec<_> = s.notes.iter().take(50).map(|n| (n.doc_id, n.tokens.clone())).collect();
    let f = build_feature_matrix(&model, &s.sae, HookPoint::pre(1), &docs).unwrap();
    let labels: Vec<bool> = s.notes.iter().take(50).map(|n| n.group == Group::B).collect();
    let probe = fit_probe(&f, &labels, 0.01, 200, 1e-9, 0).unwrap();
    let bytes = probe.to_container().to_bytes();
    let back = ProbeModel::from_container(latentscope::container::TensorFile::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, probe);
}
