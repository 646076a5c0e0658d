//! Exact identities of the forward pass and its hooks.

use icl_scope::interventions::{build_plan, Amplification};
use icl_scope::kernels::{self, dot};
use icl_scope::model::Weights;
use icl_scope::{HeadId, InterventionPlan, Label, Model, ModelConfig, TraceConfig};

use super::*;

pub const IDS: [u32; 12] = [5, 17, 3, 42, 9, 7, 1, 11, 30, 2, 7, 1];

pub fn models() -> Vec<Model> {
    let mut cfg = ModelConfig::tiny();
    cfg.n_layers = 3;
    cfg.d_model = 12;
    cfg.n_heads = 3;
    vec![tiny_model(), Model::random(cfg, 11).unwrap()]
}

pub fn every_head(m: &Model) -> Vec<HeadId> {
    m.config().heads().collect()
}

pub fn head_outputs_reconstruct_the_attention_block() {
    for m in models() {
        let out = m.forward(&IDS, &TraceConfig::all(), &InterventionPlan::default()).unwrap();
        let d = m.config().d_model;
        for l in 0..m.config().n_layers {
            let mut sum = m.weights().layers[l].out_bias.clone();
            for h in 0..m.config().n_heads {
                for (s, o) in sum.iter_mut().zip(out.trace.head_output(l, h).unwrap()) {
                    *s += o;
                }
            }
            assert_eq!(sum.len(), d);
            assert_close(&sum, out.trace.block_output(l).unwrap(), 1e-4, "reconstruction");
        }
    }
}

/// Zeroing the head's rows of the output projection removes `o_h` without
/// touching the engine's ablation path.
pub fn without_head_output(m: &Model, id: HeadId) -> Model {
    let mut w: Weights = m.weights().clone();
    let (d, dh) = (m.config().d_model, m.config().d_head());
    let rows = &mut w.layers[id.layer].out_weight.data_mut()[id.head * dh * d..(id.head + 1) * dh * d];
    rows.fill(0.0);
    Model::new(m.config().clone(), w).unwrap()
}

pub fn ablation_equals_zeroed_head_output() {
    for m in models() {
        for id in every_head(&m) {
            let plan = InterventionPlan::ablating([id]);
            let a = m.forward(&IDS, &TraceConfig::all(), &plan).unwrap();
            let b = without_head_output(&m, id)
                .forward(&IDS, &TraceConfig::all(), &InterventionPlan::default())
                .unwrap();
            assert_close(a.logits.data(), b.logits.data(), 1e-5, "logits");
            for l in 0..m.config().n_layers {
                assert_close(a.trace.layer_input(l).unwrap(), b.trace.layer_input(l).unwrap(), 1e-5, "layer input");
                assert_close(a.trace.block_output(l).unwrap(), b.trace.block_output(l).unwrap(), 1e-5, "block output");
            }
            assert!(a.trace.head_output(id.layer, id.head).unwrap().iter().all(|&v| v == 0.0));
        }
    }
}

pub fn amplification(m: &Model, a_c: f32) -> InterventionPlan {
    let amp = Amplification {
        a_c,
        a_v: 2.0,
        heads: every_head(m).into_iter().collect(),
        minority: Label::Foo,
        positions: vec![5, 10],
    };
    build_plan([], Some(amp), []).unwrap()
}

pub fn zero_gain_amplification_is_bit_identical() {
    for m in models() {
        let base = m.logits(&IDS).unwrap();
        let amped = m.forward(&IDS, &TraceConfig::disabled(), &amplification(&m, 0.0)).unwrap().logits;
        assert_eq!(base, amped);
    }
}

pub fn strip_without_positions_is_bit_identical() {
    for m in models() {
        let zeroed = m.with_zero_positions();
        let base = zeroed.logits(&IDS).unwrap();
        let plan = build_plan([], None, every_head(&m)).unwrap();
        let out = zeroed.forward(&IDS, &TraceConfig::all(), &plan).unwrap();
        assert_eq!(base, out.logits);
        for (_, ht) in out.trace.heads() {
            assert_eq!(ht.stripped_attention.as_ref().unwrap(), &ht.attention);
        }
    }
}

pub fn deleting_a_key_renormalizes_upward() {
    let m = tiny_model();
    let t = IDS.len();
    for id in every_head(&m) {
        let hv = m.head_qkv(&IDS, id.layer, id.head).unwrap();
        let dh = m.config().d_head() as f32;
        let q = hv.queries.row(t - 1);
        let scores: Vec<f32> = (0..t).map(|j| dot(q, hv.keys.row(j)) / dh.sqrt()).collect();
        let full = kernels::softmax_row(&scores, None).unwrap();
        // same pattern as the traced forward pass
        let traced = m.forward(&IDS, &TraceConfig::all(), &InterventionPlan::default()).unwrap();
        assert_close(&full, traced.trace.attention(id.layer, id.head).unwrap(), 1e-6, "attention row");
        for drop in 0..t {
            assert!(full[drop] > 0.0);
            let mask: Vec<bool> = (0..t).map(|j| j == drop).collect();
            let fewer = kernels::softmax_row(&scores, Some(&mask)).unwrap();
            assert_eq!(fewer[drop], 0.0);
            for j in (0..t).filter(|&j| j != drop) {
                let expect = full[j] / (1.0 - full[drop]);
                assert!((fewer[j] - expect).abs() <= 1e-6 * expect.max(1e-6));
                assert!(fewer[j] >= full[j]);
                // below f32 resolution the rise rounds away
                if full[drop] > 1e-6 {
                    assert!(fewer[j] > full[j], "head {id}, dropped {drop}, key {j}");
                }
            }
        }
    }
}
