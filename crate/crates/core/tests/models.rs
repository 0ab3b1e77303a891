mod common;

use approx::assert_abs_diff_eq;
use bst_core::gradcheck::grad_check;
use bst_core::models::{din_pool, Model, ModelKind};
use bst_core::{BehaviorEvent, Graph, Mode, Params, Tensor};
use common::{short_history_example, tiny_config, tiny_examples};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn set_param(params: &mut Params, name: &str, f: impl Fn(&mut Tensor)) {
    let id = params.id(name).unwrap();
    f(params.tensor_mut(id));
}

/// Summed BCE near 3 has ulp about 4e-16, so `(f+ - f-) / 2h` carries about
/// 2e-11 of rounding noise at h = 1e-5.
const ROUNDOFF_FLOOR: f64 = 1e-10;

fn gradcheck_kind(kind: ModelKind, blocks: usize) {
    let mut model = Model::init(tiny_config(kind, blocks)).unwrap();
    let examples = tiny_examples();
    let prepared: Vec<_> = examples[..4].iter().map(|e| model.prepare(e).unwrap()).collect();
    let mut params = std::mem::take(&mut model.params);
    let report = grad_check(&mut params, 1e-5, 1e-4, |g| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = None;
        for p in &prepared {
            let prob = model.forward(g, p, Mode::Eval, &mut rng)?;
            let loss = g.bce(prob, &[p.label])?;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        Ok(total.unwrap())
    })
    .unwrap();
    let worst = report.worst().unwrap();
    assert!(
        report.passed_with_floor(ROUNDOFF_FLOOR),
        "{kind}: max error {:.3e} in {} ({} vs {})",
        report.max_error(),
        worst.name,
        worst.analytic,
        worst.numeric
    );
}

#[test]
fn gradcheck_bst_one_block() {
    gradcheck_kind(ModelKind::Bst, 1);
}

#[test]
fn gradcheck_bst_two_blocks() {
    gradcheck_kind(ModelKind::Bst, 2);
}

#[test]
fn gradcheck_wdl() {
    gradcheck_kind(ModelKind::Wdl, 1);
}

#[test]
fn gradcheck_wdl_seq() {
    gradcheck_kind(ModelKind::WdlSeq, 1);
}

#[test]
fn gradcheck_din_lite() {
    gradcheck_kind(ModelKind::DinLite, 1);
}

#[test]
fn zero_mlp_predicts_one_half() {
    for kind in ModelKind::ALL {
        let mut model = Model::init(tiny_config(kind, 1)).unwrap();
        let names: Vec<String> = model
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with("mlp."))
            .collect();
        for n in names {
            set_param(&mut model.params, &n, |t| t.data_mut().fill(0.0));
        }
        for e in &tiny_examples()[..5] {
            assert_eq!(model.predict(e).unwrap(), 0.5, "{kind}");
        }
    }
}

#[test]
fn predictions_are_probabilities_and_deterministic() {
    let examples = tiny_examples();
    for kind in ModelKind::ALL {
        let model = Model::init(tiny_config(kind, 1)).unwrap();
        let batch = model.predict_batch(&examples).unwrap();
        for (e, &p) in examples.iter().zip(&batch) {
            assert!(p > 0.0 && p < 1.0);
            assert_eq!(model.predict(e).unwrap(), p);
        }
        // init is seeded
        let again = Model::init(tiny_config(kind, 1)).unwrap();
        assert_eq!(again.predict_batch(&examples).unwrap(), batch);
    }
}

#[test]
fn padded_slot_contents_are_ignored() {
    let e = short_history_example();
    for kind in ModelKind::ALL {
        for blocks in [1, 2] {
            let model = Model::init(tiny_config(kind, blocks)).unwrap();
            let p = model.prepare(&e).unwrap();
            let base = model.predict_prepared(&p).unwrap();
            let mut q = p.clone();
            for s in 0..q.seq.history_len() {
                if !q.seq.mask[s] {
                    q.seq.items[s] = 3 + s;
                    q.seq.categories[s] = 2;
                    q.seq.buckets[s] = 7;
                }
            }
            assert_ne!(p.seq, q.seq);
            assert_eq!(model.predict_prepared(&q).unwrap(), base, "{kind} b={blocks}");
        }
    }
}

#[test]
fn wdl_ignores_history() {
    let model = Model::init(tiny_config(ModelKind::Wdl, 1)).unwrap();
    let mut e = short_history_example();
    let base = model.predict(&e).unwrap();
    e.history.clear();
    assert_eq!(model.predict(&e).unwrap(), base);
    e.history.push(BehaviorEvent::new(9, 3, e.target.timestamp - 10));
    assert_eq!(model.predict(&e).unwrap(), base);
}

#[test]
fn bst_sees_order_and_recency() {
    let model = Model::init(tiny_config(ModelKind::Bst, 1)).unwrap();
    let mut e = short_history_example();
    let t = e.target.timestamp;
    e.history = vec![
        BehaviorEvent::new(4, 1, t - 1000),
        BehaviorEvent::new(17, 3, t - 3),
    ];
    let base = model.predict(&e).unwrap();

    let mut swapped = e.clone();
    swapped.history[0].timestamp = t - 3;
    swapped.history[1].timestamp = t - 1000;
    assert_ne!(model.predict(&swapped).unwrap(), base);

    let mut older = e.clone();
    older.history[1].timestamp = t - 200;
    assert_ne!(model.predict(&older).unwrap(), base);
}

#[test]
fn pooled_baselines_ignore_history_order() {
    let mut e = short_history_example();
    let t = e.target.timestamp;
    e.history = vec![
        BehaviorEvent::new(4, 1, t - 1000),
        BehaviorEvent::new(17, 3, t - 3),
        BehaviorEvent::new(11, 2, t - 40),
    ];
    // WDL(+Seq) has no positions, so reassigning timestamps is a permutation
    let model = Model::init(tiny_config(ModelKind::WdlSeq, 1)).unwrap();
    let base = model.predict(&e).unwrap();
    let mut f = e.clone();
    f.history[0].timestamp = t - 3;
    f.history[1].timestamp = t - 40;
    f.history[2].timestamp = t - 1000;
    assert_eq!(model.predict(&f).unwrap(), base);

    // DIN keeps each event's position; permute whole slots
    let model = Model::init(tiny_config(ModelKind::DinLite, 1)).unwrap();
    let p = model.prepare(&e).unwrap();
    let base = model.predict_prepared(&p).unwrap();
    let real: Vec<usize> = (0..p.seq.history_len()).filter(|&s| p.seq.mask[s]).collect();
    let mut q = p.clone();
    for (k, &s) in real.iter().enumerate() {
        let from = real[(k + 1) % real.len()];
        q.seq.items[s] = p.seq.items[from];
        q.seq.categories[s] = p.seq.categories[from];
        q.seq.buckets[s] = p.seq.buckets[from];
    }
    assert_ne!(p.seq, q.seq);
    assert_eq!(model.predict_prepared(&q).unwrap(), base);
}

fn din_weights_and_rows(model: &Model, e: &bst_core::Example) -> (Tensor, Tensor, Tensor) {
    let p = model.prepare(e).unwrap();
    let mut g = Graph::new(&model.params);
    let item = g.param(model.tables.item);
    let cat = g.param(model.tables.category);
    let pos = g.param(model.tables.position);
    let t = p.seq.history_len();
    let ti = g.gather(item, &[p.seq.items[t]]).unwrap();
    let tc = g.gather(cat, &[p.seq.categories[t]]).unwrap();
    let tp = g.gather(pos, &[p.seq.buckets[t]]).unwrap();
    let target = g.concat_cols(&[ti, tc, tp]).unwrap();
    let (pooled, w) = din_pool(model, &mut g, &p.seq, target).unwrap();
    let real: Vec<usize> = (0..t).filter(|&s| p.seq.mask[s]).collect();
    let pick = |v: &[usize]| real.iter().map(|&s| v[s]).collect::<Vec<_>>();
    let hi = g.gather(item, &pick(&p.seq.items)).unwrap();
    let hc = g.gather(cat, &pick(&p.seq.categories)).unwrap();
    let hp = g.gather(pos, &pick(&p.seq.buckets)).unwrap();
    let h = g.concat_cols(&[hi, hc, hp]).unwrap();
    (g.value(pooled).clone(), g.value(w.unwrap()).clone(), g.value(h).clone())
}

#[test]
fn din_weights_form_a_distribution() {
    let model = Model::init(tiny_config(ModelKind::DinLite, 1)).unwrap();
    for e in tiny_examples().iter().filter(|e| !e.history.is_empty()).take(20) {
        let (_, w, _) = din_weights_and_rows(&model, e);
        assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-12);
        assert!(w.data().iter().all(|&x| x > 0.0));
    }
}

#[test]
fn din_with_zero_bilinear_is_the_mean() {
    let mut model = Model::init(tiny_config(ModelKind::DinLite, 1)).unwrap();
    set_param(&mut model.params, "din.bilinear", |t| t.data_mut().fill(0.0));
    let e = short_history_example();
    let (pooled, w, h) = din_weights_and_rows(&model, &e);
    let n = h.rows() as f64;
    for &x in w.data() {
        assert_abs_diff_eq!(x, 1.0 / n, epsilon = 1e-15);
    }
    for c in 0..h.cols() {
        let mean: f64 = (0..h.rows()).map(|r| h.get(r, c)).sum::<f64>() / n;
        assert_abs_diff_eq!(pooled.get(0, c), mean, epsilon = 1e-12);
    }
}

#[test]
fn empty_history_is_allowed() {
    let mut e = short_history_example();
    e.history.clear();
    for kind in ModelKind::ALL {
        let model = Model::init(tiny_config(kind, 1)).unwrap();
        let p = model.predict(&e).unwrap();
        assert!(p > 0.0 && p < 1.0, "{kind}");
    }
}

#[test]
fn train_mode_dropout_perturbs_eval_does_not() {
    let model = Model::init(tiny_config(ModelKind::Bst, 1)).unwrap();
    let p = model.prepare(&tiny_examples()[0]).unwrap();
    let run = |mode, seed| {
        let mut g = Graph::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = model.forward(&mut g, &p, mode, &mut rng).unwrap();
        g.value(out).get(0, 0)
    };
    assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
    assert_ne!(run(Mode::Train, 1), run(Mode::Train, 2));
}

#[test]
fn from_params_names_the_mismatched_tensor() {
    let model = Model::init(tiny_config(ModelKind::Bst, 1)).unwrap();
    let mut wider = tiny_config(ModelKind::Bst, 1);
    wider.mlp_hidden = [32, 8, 4];
    let err = Model::from_params(wider, model.params.clone()).unwrap_err();
    assert!(err.to_string().contains("mlp.l0.w"), "{err}");

    let err = Model::from_params(tiny_config(ModelKind::Wdl, 1), model.params).unwrap_err();
    assert!(err.to_string().contains("mlp.l0.w") || err.to_string().contains("block0"), "{err}");
}
