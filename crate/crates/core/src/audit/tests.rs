// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::container::Tensor;
use crate::runtime::{build_random_model, ModelConfig, Precision};
use crate::tensor::Matrix;
use proptest::prelude::*;

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 16,
        max_seq: 16,
        numeric_precision: Precision::Fp64,
    }
}

/// Random model whose unembedding is replaced by zeros plus `bias`.
fn bias_only_model(bias: Vec<f64>) -> Model {
    let c = cfg();
    let mut f = build_random_model(&c, 4).unwrap().to_container();
    f.take("unembed").unwrap();
    f.take("unembed_bias").unwrap();
    f.push("unembed", Tensor::matrix(&Matrix::zeros(c.vocab_size, c.d_model)));
    f.push("unembed_bias", Tensor::vector(bias));
    Model::from_container(f).unwrap()
}

#[test]
fn logitdiff_examples() {
    let l = [0.0, 2.5, 1.0, 1.0];
    assert_eq!(logitdiff(&l, 1, 2).unwrap(), 1.5);
    assert_eq!(logitdiff(&l, 2, 1).unwrap(), -1.5);
    assert_eq!(logitdiff(&l, 2, 3).unwrap(), 0.0);
    assert!(logitdiff(&l, 4, 1).is_err());
}

#[test]
fn fldd_examples() {
    assert_eq!(fldd(2.0, 1.0, FLDD_EPSILON).unwrap(), 0.5);
    assert_eq!(fldd(-3.0, -3.0, FLDD_EPSILON).unwrap(), 0.0);
    assert_eq!(fldd(0.7, 0.0, FLDD_EPSILON).unwrap(), 1.0);
    assert!(fldd(1e-10, 1.0, FLDD_EPSILON).is_err());
    let s = FlddSummary::from_rows(
        vec![
            FlddRow { doc_id: 0, version: "B".into(), clean: 2.0, ablated: 1.0, fldd: None },
            FlddRow { doc_id: 1, version: "B".into(), clean: 0.0, ablated: 1.0, fldd: None },
        ],
        FLDD_EPSILON,
    );
    assert_eq!((s.n_used, s.n_excluded, s.mean), (1, 1, Some(0.5)));
}

#[test]
fn paired_delta_examples() {
    let d = PairedDelta::from_logitdiffs(&[(1.0, 0.0), (0.0, 1.0)]).unwrap();
    assert_eq!(d.mean, 0.0);
    assert_eq!(d.t_stat(), Some(0.0));
    assert!((d.p_value().unwrap() - 1.0).abs() < 1e-12);

    let model = build_random_model(&cfg(), 9).unwrap();
    let answer = AnswerTokens { yes: 1, no: 2 };
    let same: Vec<_> = (0..4).map(|i| (TokenSequence(vec![i, 3]), TokenSequence(vec![i, 3]))).collect();
    let r = delta_logitdiff(&model, &same, answer, Intervention::None).unwrap();
    assert!(r.per_pair.iter().all(|p| p.delta == 0.0));
    assert_eq!(r.mean, 0.0);
    assert!(delta_logitdiff(&model, &[], answer, Intervention::None).is_err());
}

#[test]
fn paired_delta_is_antisymmetric() {
    let model = build_random_model(&cfg(), 2).unwrap();
    let answer = AnswerTokens { yes: 1, no: 2 };
    let pairs: Vec<_> = (0..6u32)
        .map(|i| (TokenSequence(vec![i, 5, 7]), TokenSequence(vec![i, 5, 8 + i % 3])))
        .collect();
    let swapped: Vec<_> = pairs.iter().map(|(b, a)| (a.clone(), b.clone())).collect();
    let x = delta_logitdiff(&model, &pairs, answer, Intervention::None).unwrap();
    let y = delta_logitdiff(&model, &swapped, answer, Intervention::None).unwrap();
    assert!((x.mean + y.mean).abs() < 1e-12);
    assert!((x.t_stat().unwrap().abs() - y.t_stat().unwrap().abs()).abs() < 1e-9);
}

#[test]
fn positive_rate_examples() {
    let seqs = |ids: &[u32]| ids.iter().map(|&t| TokenSequence(vec![t, 0])).collect::<Vec<_>>();
    assert_eq!(positive_rate_tokens(&seqs(&[1, 1, 1]), 1).unwrap(), 1.0);
    assert_eq!(positive_rate_tokens(&seqs(&[1, 2, 1, 2]), 1).unwrap(), 0.5);
    assert_eq!(positive_rate_tokens(&seqs(&[2, 2]), 1).unwrap(), 0.0);
    assert!(positive_rate_tokens(&[], 1).is_err());
    let texts = vec!["Yes, likely".to_string(), "no".into(), "maybe yes".into(), "YES".into()];
    assert_eq!(positive_rate_texts(&texts, "yes").unwrap(), 0.5);
}

#[test]
fn term_scan_examples() {
    let terms = vec!["Race".to_string(), "ethnic".into()];
    let none = vec!["fever and cough".to_string(), "stable".into()];
    assert_eq!(term_scan(&none, &terms).unwrap().fraction_containing, 0.0);
    let all = vec!["RACE noted".to_string(), "multiethnic".into()];
    assert_eq!(term_scan(&all, &terms).unwrap().fraction_containing, 1.0);
    let mixed = vec!["a".to_string(), "b race".into(), "c".into()];
    let r = term_scan(&mixed, &terms).unwrap();
    assert!((r.fraction_containing - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(r.flags, vec![false, true, false]);
    assert!(term_scan(&mixed, &[]).is_err());
}

#[test]
fn perplexity_examples() {
    let uniform = bias_only_model(vec![0.0; 12]);
    let p = perplexity(&uniform, &TokenSequence(vec![3, 1, 4, 1, 5])).unwrap();
    assert!((p - 12.0).abs() < 1e-9);

    let mut bias = vec![0.0; 12];
    bias[7] = 1e3;
    let certain = bias_only_model(bias);
    assert!((perplexity(&certain, &TokenSequence(vec![7, 7, 7])).unwrap() - 1.0).abs() < 1e-12);

    let model = build_random_model(&cfg(), 5).unwrap();
    let seq = TokenSequence(vec![2, 9]);
    let probs = crate::runtime::softmax(model.forward(&seq).unwrap().row(0));
    assert!((perplexity(&model, &seq).unwrap() - 1.0 / probs[9]).abs() < 1e-9);
    assert!(perplexity(&model, &TokenSequence(vec![2])).is_err());
}

#[test]
fn generation_rates() {
    let groups = BTreeMap::from([("A".to_string(), vec![8, 9]), ("B".to_string(), vec![10, 11])]);
    let prompt = TokenSequence(vec![1, 2]);
    let sampler = SamplerConfig::temperature(1.0, 3, 17);

    let mut bias = vec![0.0; 12];
    bias[9] = 50.0;
    let forced = bias_only_model(bias);
    let r = generation_rate_audit(&forced, Intervention::None, &prompt, &sampler, 20, &groups).unwrap();
    assert_eq!(r.fractions["A"], 1.0);
    assert_eq!(r.unclassified, 0);

    let model = build_random_model(&cfg(), 3).unwrap();
    let a = generation_rate_audit(&model, Intervention::None, &prompt, &sampler, 30, &groups).unwrap();
    let b = generation_rate_audit(&model, Intervention::None, &prompt, &sampler, 30, &groups).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.counts.values().sum::<usize>() + a.unclassified, 30);

    let overlap = BTreeMap::from([("A".to_string(), vec![8]), ("B".to_string(), vec![8])]);
    assert!(generation_rate_audit(&model, Intervention::None, &prompt, &sampler, 5, &overlap).is_err());
    assert!(generation_rate_audit(&model, Intervention::None, &prompt, &sampler, 0, &groups).is_err());
}

#[test]
fn pairs_render_differ_only_at_slot() {
    let layout = VocabLayout { fillers: vec![0, 1, 2], group_a: vec![3, 4], group_b: vec![5, 6], conditions: vec![7] };
    let records: Vec<NoteRecord> = (0..10)
        .map(|i| NoteRecord {
            doc_id: i,
            tokens: TokenSequence(vec![0, 1, 2, 7, 1]),
            group: crate::corpus::Group::A,
            condition: true,
            marker_position: None,
        })
        .collect();
    let spec = PairSpec { n_pairs: 6, context_len: 3, seed: 1 };
    let pairs = build_pairs(&records, &layout, &spec).unwrap();
    assert_eq!(pairs, build_pairs(&records, &layout, &spec).unwrap());
    assert_eq!(pairs.len(), 6);
    for p in &pairs {
        let (b, a) = p.render(&[2, 2], &layout).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(&b.ids()[..5], &a.ids()[..5]);
        assert!(layout.group_b.contains(&b.ids()[5]) && layout.group_a.contains(&a.ids()[5]));
    }
    assert!(build_pairs(&records, &layout, &PairSpec { n_pairs: 11, ..spec }).is_err());
}

#[test]
fn report_serializes_infinite_t() {
    let d = PairedDelta::from_logitdiffs(&[(1.0, 0.5), (2.0, 1.5)]).unwrap();
    let json = serde_json::to_string(&d).unwrap();
    assert!(json.contains("\"inf\""));
    let back: PairedDelta = serde_json::from_str(&json).unwrap();
    assert_eq!(back.t_stat(), Some(f64::INFINITY));
}

proptest! {
    #[test]
    fn fldd_fixed_points(c in prop_oneof![-1e3..-1e-6f64, 1e-6..1e3f64]) {
        prop_assert_eq!(fldd(c, c, FLDD_EPSILON).unwrap(), 0.0);
        prop_assert_eq!(fldd(c, 0.0, FLDD_EPSILON).unwrap(), 1.0);
    }

    #[test]
    fn perplexity_is_permutation_invariant(seed in 0u64..50, tokens in prop::collection::vec(0u32..12, 2..8)) {
        // permute vocabulary ids in the unembedding and in the sequence alike
        let c = cfg();
        let model = build_random_model(&c, seed).unwrap();
        let perm: Vec<u32> = (0..12).map(|i| (i * 5 + 3) % 12).collect();
        let mut f = model.to_container();
        let u = f.take("unembed").unwrap().into_matrix("unembed", 12, c.d_model).unwrap();
        let ub = f.take("unembed_bias").unwrap().into_vector("unembed_bias", 12).unwrap();
        let mut pu = Matrix::zeros(12, c.d_model);
        let mut pb = vec![0.0; 12];
        for (i, &p) in perm.iter().enumerate() {
            pu.row_mut(p as usize).copy_from_slice(u.row(i));
            pb[p as usize] = ub[i];
        }
        let e = f.take("token_embed").unwrap().into_matrix("token_embed", 12, c.d_model).unwrap();
        let mut pe = Matrix::zeros(12, c.d_model);
        for (i, &p) in perm.iter().enumerate() {
            pe.row_mut(p as usize).copy_from_slice(e.row(i));
        }
        f.push("unembed", Tensor::matrix(&pu));
        f.push("unembed_bias", Tensor::vector(pb));
        f.push("token_embed", Tensor::matrix(&pe));
        let permuted = Model::from_container(f).unwrap();
        let seq = TokenSequence(tokens.clone());
        let pseq = TokenSequence(tokens.iter().map(|&t| perm[t as usize]).collect());
        let a = perplexity(&model, &seq).unwrap();
        let b = perplexity(&permuted, &pseq).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a);
    }
}
