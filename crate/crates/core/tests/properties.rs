//! Algebraic identities and invariants of the forward pass and its hooks.

mod common;

use common::identities::*;
use common::*;
use icl_scope::interventions::build_plan;
use icl_scope::{HeadId, InterventionPlan, Lens, Model, ModelConfig, TraceConfig};

#[test]
fn attention_is_causal_and_normalized() {
    for m in models() {
        let out = m.forward(&IDS, &TraceConfig::all(), &InterventionPlan::default()).unwrap();
        for (_, ht) in out.trace.heads() {
            let full = ht.full_attention.as_ref().unwrap();
            for i in 0..IDS.len() {
                let row = full.row(i);
                assert!(row[i + 1..].iter().all(|&a| a == 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
            assert_eq!(ht.attention.as_slice(), full.row(IDS.len() - 1));
        }
    }
}

#[test]
fn tracing_and_empty_plans_do_not_change_logits() {
    for m in models() {
        let none = InterventionPlan::default();
        let base = m.forward(&IDS, &TraceConfig::disabled(), &none).unwrap().logits;
        let traced = m.forward(&IDS, &TraceConfig::all(), &none).unwrap().logits;
        let default_cfg = TraceConfig::for_prompt(1..m.config().n_layers, [3, 7], IDS.len());
        let partial = m.forward(&IDS, &default_cfg, &none).unwrap().logits;
        let built = build_plan([], None, []).unwrap();
        let empty = m.forward(&IDS, &TraceConfig::disabled(), &built).unwrap().logits;
        assert_eq!(base, traced);
        assert_eq!(base, partial);
        assert_eq!(base, empty);
    }
}

#[test]
fn ablating_everything_leaves_only_output_biases() {
    let m = tiny_model();
    let plan = build_plan(every_head(&m), None, []).unwrap();
    let out = m.forward(&IDS, &TraceConfig::all(), &plan).unwrap();
    for l in 0..2 {
        assert_eq!(out.trace.block_output(l).unwrap(), m.weights().layers[l].out_bias.as_slice());
    }
}

#[test]
fn single_token_strip_is_identity() {
    let m = tiny_model();
    let plan = build_plan([], None, every_head(&m)).unwrap();
    let out = m.forward(&[3], &TraceConfig::all(), &plan).unwrap();
    assert_eq!(out.logits, m.logits(&[3]).unwrap());
    for (_, ht) in out.trace.heads() {
        assert_eq!(ht.stripped_attention.as_deref(), Some(&[1.0f32][..]));
    }
}

#[test]
fn stripped_rows_are_distributions() {
    for m in models() {
        let plan = build_plan([], None, every_head(&m)).unwrap();
        let out = m.forward(&IDS, &TraceConfig::all(), &plan).unwrap();
        for (_, ht) in out.trace.heads() {
            let row = ht.stripped_attention.as_ref().unwrap();
            assert_eq!(row.len(), IDS.len());
            assert!(row.iter().all(|&a| a > 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn amplification_only_touches_the_readout() {
    for m in models() {
        let base = m.forward(&IDS, &TraceConfig::all(), &InterventionPlan::default()).unwrap();
        let amped = m.forward(&IDS, &TraceConfig::all(), &amplification(&m, 0.03)).unwrap();
        for l in 0..m.config().n_layers {
            assert_eq!(base.trace.layer_input(l).unwrap(), amped.trace.layer_input(l).unwrap());
            assert_eq!(base.trace.block_output(l).unwrap(), amped.trace.block_output(l).unwrap());
        }
        // earlier positions are untouched, the last one moves
        let n = IDS.len();
        assert_eq!(base.logits.row(0), amped.logits.row(0));
        assert_eq!(base.logits.row(n - 2), amped.logits.row(n - 2));
        assert_ne!(base.trace.final_hidden().unwrap(), amped.trace.final_hidden().unwrap());

        // the shift equals a · Σ α^p · vo^p over heads and positions
        let mut expect = base.trace.final_hidden().unwrap().to_vec();
        for id in every_head(&m) {
            for p in [5, 10] {
                let w = base.trace.weighted_value_output(id.layer, id.head, p).unwrap();
                for (e, v) in expect.iter_mut().zip(w) {
                    *e += 0.06 * v;
                }
            }
        }
        assert_close(amped.trace.final_hidden().unwrap(), &expect, 1e-5, "adjusted hidden state");
    }
}

#[test]
fn lens_limits_and_consistency() {
    let m = tiny_model();
    let lens = Lens::new(&m);
    let (foo, bar) = (7, 11);

    // single-token prompt: α = [1], so weighted and plain logit minus agree
    let out = m.forward(&[9], &TraceConfig::all(), &InterventionPlan::default()).unwrap();
    for id in every_head(&m) {
        let w = lens.logit_minus(&out.trace, id.layer, id.head, 0, foo, bar, true).unwrap();
        let u = lens.logit_minus(&out.trace, id.layer, id.head, 0, foo, bar, false).unwrap();
        assert_eq!(w, u);
        let vo = out.trace.value_output(id.layer, id.head, 0).unwrap();
        let tiny: Vec<f32> = vo.iter().map(|v| v * 1e-8).collect();
        assert!(lens.minus(&tiny, foo, bar).unwrap().abs() < 1e-3);
    }

    // an ablated head writes nothing, so its score is exactly zero
    let plan = InterventionPlan::ablating([HeadId::new(1, 0)]);
    let cfg = TraceConfig { layer_inputs: true, ..TraceConfig::all() };
    let out = m.forward(&IDS, &cfg, &plan).unwrap();
    assert_eq!(lens.head_score(&out.trace, 1, 0, foo).unwrap(), 0.0);

    // pushing along a label's unembedding row raises its log-probability
    let lin = out.trace.layer_input(1).unwrap();
    for label in [foo, bar] {
        let row = m.weights().token_embedding.row(label as usize);
        let pushed: Vec<f32> = lin.iter().zip(row).map(|(x, e)| x + 0.5 * e).collect();
        assert!(lens.log_prob(&pushed, label).unwrap() > lens.log_prob(lin, label).unwrap());
    }
}

#[test]
fn head_score_matches_brute_force() {
    let m = tiny_model();
    let lens = Lens::new(&m);
    let out = m.forward(&IDS, &TraceConfig::all(), &InterventionPlan::default()).unwrap();
    let e = &m.weights().token_embedding;
    let log_p = |v: &[f64], b: usize| -> f64 {
        let logits: Vec<f64> = (0..e.rows())
            .map(|r| e.row(r).iter().zip(v).map(|(&a, &x)| a as f64 * x).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits[b] - lse
    };
    for id in every_head(&m) {
        let lin: Vec<f64> = out.trace.layer_input(id.layer).unwrap().iter().map(|&x| x as f64).collect();
        let o = out.trace.head_output(id.layer, id.head).unwrap();
        let with: Vec<f64> = lin.iter().zip(o).map(|(a, &b)| a + b as f64).collect();
        let want = log_p(&with, 7) - log_p(&lin, 7);
        let got = lens.head_score(&out.trace, id.layer, id.head, 7).unwrap() as f64;
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn default_trace_fits_the_memory_budget() {
    let cfg = ModelConfig::gpt2_large();
    let deep = cfg.n_layers / 2..cfg.n_layers;
    let trace = TraceConfig::for_prompt(deep, [10, 30, 50, 70], 100);
    assert!(trace.estimated_bytes(&cfg, 100) < 100 * 1024 * 1024);

    let m = tiny_model();
    let cfg = TraceConfig::for_prompt(1..2, [2, 5], IDS.len());
    let out = m.forward(&IDS, &cfg, &InterventionPlan::default()).unwrap();
    let floats: usize = out.trace.heads().map(|(_, h)| h.attention.len() + h.output.len() + h.values.len() * 8).sum::<usize>()
        + 2 * 8;
    assert_eq!(cfg.estimated_bytes(m.config(), IDS.len()), floats * 4);
}

#[test]
fn head_and_layer_bounds_are_checked() {
    let m = tiny_model();
    let plan = InterventionPlan::ablating([HeadId::new(2, 0)]);
    assert!(m.forward(&IDS, &TraceConfig::disabled(), &plan).is_err());
    let plan = InterventionPlan::ablating([HeadId::new(0, 2)]);
    assert!(m.forward(&IDS, &TraceConfig::disabled(), &plan).is_err());
    assert!(m.head_qkv(&IDS, 2, 0).is_err());
}

#[test]
fn strip_needs_absolute_positions() {
    let mut cfg = ModelConfig::tiny();
    cfg.positional = icl_scope::model::Positional::None;
    let m = Model::random(cfg, 2).unwrap();
    let plan = build_plan([], None, [HeadId::new(0, 0)]).unwrap();
    assert!(matches!(
        m.forward(&IDS, &TraceConfig::disabled(), &plan),
        Err(icl_scope::Error::NoAbsolutePositions)
    ));
}

#[test]
fn head_outputs_reconstruct_the_attention_block() {
    identities::head_outputs_reconstruct_the_attention_block();
}

#[test]
fn ablation_equals_zeroed_head_output() {
    identities::ablation_equals_zeroed_head_output();
}

#[test]
fn zero_gain_amplification_is_bit_identical() {
    identities::zero_gain_amplification_is_bit_identical();
}

#[test]
fn strip_without_positions_is_bit_identical() {
    identities::strip_without_positions_is_bit_identical();
}

#[test]
fn deleting_a_key_renormalizes_upward() {
    identities::deleting_a_key_renormalizes_upward();
}
