use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sgst::graph::{RawObject, RawRelation, RawSceneGraph, SceneGraph};
use sgst::mask::Mask;
use sgst::model::{encoder, AlphaMode, GraphInput, HeadWeights, Model, ModelConfig};
use sgst::normalize::{entmax_bisect, softmax};
use sgst::tape::{AlphaSource, Tape};
use sgst::vocab::Vocabulary;
use sgst::Tensor;

fn config(layers: usize, heads: usize, alpha: AlphaMode) -> ModelConfig {
    ModelConfig {
        layers,
        heads,
        d_model: 8,
        d_ff: 12,
        max_vertices: 12,
        alpha,
        ..ModelConfig::desk(10, 8)
    }
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn param(model: &Model, name: &str) -> Tensor {
    model.params.get(name).unwrap().clone()
}

/// Runs `f` on a frozen tape over `model`'s parameters and returns the
/// value of the resulting variable.
fn run(
    model: &Model,
    f: impl FnOnce(&mut Tape, &sgst::model::ParamVars) -> sgst::Result<sgst::tape::Var>,
) -> Tensor {
    let mut tape = Tape::new();
    let pv = model.params.register_frozen(&mut tape);
    let out = f(&mut tape, &pv).unwrap();
    tape.value(out).clone()
}

fn chain_mask(m: usize) -> Mask {
    Mask::from_fn(m, m, |i, j| i.abs_diff(j) <= 1)
}

/// Row-wise masked attention computed densely from the definition.
fn attention_oracle(
    v: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    mask: &Mask,
    alpha: Option<f64>,
    scale: f64,
) -> Tensor {
    let q = v.matmul(wq).unwrap();
    let k = v.matmul(wk).unwrap();
    let values = v.matmul(wv).unwrap();
    let m = v.rows();
    let mut rows = Vec::new();
    for i in 0..m {
        let idx: Vec<usize> = (0..m).filter(|&j| mask.get(i, j)).collect();
        let z: Vec<f64> = idx
            .iter()
            .map(|&j| {
                q.row(i)
                    .iter()
                    .zip(k.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let p = match alpha {
            None => softmax(&z).unwrap().probs,
            Some(a) => entmax_bisect(&z, a).unwrap().probs,
        };
        let mut row = vec![0.0; values.cols()];
        for (w, &j) in p.iter().zip(&idx) {
            for (r, x) in row.iter_mut().zip(values.row(j)) {
                *r += w * x;
            }
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

fn head(tape: &mut Tape, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> HeadWeights {
    HeadWeights {
        wq: tape.constant(wq.clone()),
        wk: tape.constant(wk.clone()),
        wv: tape.constant(wv.clone()),
    }
}

#[test]
fn lone_neighbor_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let (wq, wk, wv) = (
        Tensor::randn(&[8, 4], 1.0, &mut rng),
        Tensor::randn(&[8, 4], 1.0, &mut rng),
        Tensor::randn(&[8, 4], 1.0, &mut rng),
    );
    let mask = Mask::from_fn(4, 4, |i, j| i == j);
    let mut tape = Tape::new();
    let x = tape.constant(v.clone());
    let hw = head(&mut tape, &wq, &wk, &wv);
    let out = encoder::graph_attention_head(&mut tape, x, &mask, &hw, AlphaSource::Fixed(1.5), 0.5)
        .unwrap();
    assert_eq!(tape.value(out), &v.matmul(&wv).unwrap());
}

#[test]
fn equal_vertices_attend_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let row = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let v = Tensor::from_rows(&vec![row.row(0).to_vec(); 5]);
    let wq = Tensor::randn(&[8, 4], 1.0, &mut rng);
    let wk = Tensor::randn(&[8, 4], 1.0, &mut rng);
    let mask = chain_mask(5);
    let mut tape = Tape::new();
    let scores = {
        let x = tape.constant(v.clone());
        let (q, k) = (tape.constant(wq), tape.constant(wk));
        let q = tape.matmul(x, q).unwrap();
        let k = tape.matmul(x, k).unwrap();
        tape.matmul_nt(q, k).unwrap()
    };
    let w = tape
        .attention_weights(scores, &mask, AlphaSource::Fixed(1.5))
        .unwrap();
    let w = tape.value(w);
    for i in 0..5 {
        let n = mask.row(i).iter().filter(|&&b| b).count() as f64;
        for j in 0..5 {
            let expected = if mask.get(i, j) { 1.0 / n } else { 0.0 };
            assert!((w.get(i, j) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn chain_attention_matches_dense_oracle() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let (wq, wk, wv) = (
            Tensor::randn(&[8, 4], 1.0, &mut rng),
            Tensor::randn(&[8, 4], 1.0, &mut rng),
            Tensor::randn(&[8, 4], 1.0, &mut rng),
        );
        let mask = chain_mask(4);
        for (src, alpha) in [
            (AlphaSource::Softmax, None),
            (AlphaSource::Fixed(1.5), Some(1.5)),
            (AlphaSource::Fixed(1.3), Some(1.3)),
        ] {
            let mut tape = Tape::new();
            let x = tape.constant(v.clone());
            let hw = head(&mut tape, &wq, &wk, &wv);
            let out = encoder::graph_attention_head(&mut tape, x, &mask, &hw, src, 0.5).unwrap();
            let oracle = attention_oracle(&v, &wq, &wk, &wv, &mask, alpha, 0.5);
            assert!(
                max_diff(tape.value(out), &oracle) < 1e-8,
                "seed {seed} alpha {alpha:?}"
            );
        }
    }
}

#[test]
fn zero_output_projection_is_pure_residual() {
    let mut model = Model::new(config(1, 2, AlphaMode::Fixed(1.5)), 3).unwrap();
    model
        .params
        .get_mut("enc.0.attn.wo")
        .unwrap()
        .data_mut()
        .fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let out = run(&model, |t, pv| {
        let x = t.constant(v.clone());
        encoder::multi_head_graph_attention(t, pv, &model.config, 0, x, &chain_mask(5))
    });
    assert_eq!(out, v);
}

#[test]
fn single_head_identity_projection_adds_head_output() {
    let mut model = Model::new(config(1, 1, AlphaMode::Softmax), 4).unwrap();
    *model.params.get_mut("enc.0.attn.wo").unwrap() = Tensor::identity(8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let mask = chain_mask(5);
    let out = run(&model, |t, pv| {
        let x = t.constant(v.clone());
        encoder::multi_head_graph_attention(t, pv, &model.config, 0, x, &mask)
    });
    let head = attention_oracle(
        &v,
        &param(&model, "enc.0.attn.wq"),
        &param(&model, "enc.0.attn.wk"),
        &param(&model, "enc.0.attn.wv"),
        &mask,
        None,
        model.config.score_factor(),
    );
    assert!(max_diff(&out, &v.add(&head).unwrap()) < 1e-12);
}

#[test]
fn two_heads_match_manual_concat_and_projection() {
    for alpha in [AlphaMode::Softmax, AlphaMode::Fixed(1.5)] {
        let model = Model::new(config(1, 2, alpha), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let mask = Mask::from_fn(6, 6, |i, j| i == j || (i + j) % 3 == 0);
        let out = run(&model, |t, pv| {
            let x = t.constant(v.clone());
            encoder::multi_head_graph_attention(t, pv, &model.config, 0, x, &mask)
        });
        let alpha = match alpha {
            AlphaMode::Fixed(a) => Some(a),
            _ => None,
        };
        let block = |name: &str, h: usize| param(&model, name).columns(4 * h, 4).unwrap();
        let heads: Vec<Tensor> = (0..2)
            .map(|h| {
                attention_oracle(
                    &v,
                    &block("enc.0.attn.wq", h),
                    &block("enc.0.attn.wk", h),
                    &block("enc.0.attn.wv", h),
                    &mask,
                    alpha,
                    0.5,
                )
            })
            .collect();
        let concat = Tensor::concat_cols(&[&heads[0], &heads[1]]).unwrap();
        let oracle = v
            .add(&concat.matmul(&param(&model, "enc.0.attn.wo")).unwrap())
            .unwrap();
        assert!(max_diff(&out, &oracle) < 1e-12);
    }
}

fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .map(|i| {
            let r = x.row(i);
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(k, v)| (v - mean) / (var + 1e-5).sqrt() * gain.data()[k] + bias.data()[k])
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

#[test]
fn block_matches_step_by_step_recomposition() {
    let mut model = Model::new(config(1, 2, AlphaMode::Fixed(1.5)), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (_, t) in model.params.iter_mut() {
        let noise = Tensor::randn(t.shape(), 0.2, &mut rng);
        t.add_assign(&noise).unwrap();
    }
    let v_hat = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let out = run(&model, |t, pv| {
        let x = t.constant(v_hat.clone());
        encoder::encoder_block(t, pv, &model.config, 0, x)
    });
    let p = |n: &str| param(&model, &format!("enc.0.{n}"));
    let normed = layer_norm_rows(&v_hat, &p("ln_attn.gain"), &p("ln_attn.bias"));
    let hidden = normed
        .matmul(&p("ffn.w1"))
        .unwrap()
        .add_row(&p("ffn.b1"))
        .unwrap()
        .relu();
    let ffn = hidden
        .matmul(&p("ffn.w2"))
        .unwrap()
        .add_row(&p("ffn.b2"))
        .unwrap();
    let oracle = layer_norm_rows(
        &ffn.add(&normed).unwrap(),
        &p("ln_out.gain"),
        &p("ln_out.bias"),
    );
    assert!(max_diff(&out, &oracle) < 1e-12);
}

#[test]
fn zero_feed_forward_gives_double_layer_norm() {
    let mut model = Model::new(config(1, 2, AlphaMode::Fixed(1.5)), 7).unwrap();
    for name in ["w1", "b1", "w2", "b2"] {
        model
            .params
            .get_mut(&format!("enc.0.ffn.{name}"))
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v_hat = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let out = run(&model, |t, pv| {
        let x = t.constant(v_hat.clone());
        encoder::encoder_block(t, pv, &model.config, 0, x)
    });
    let (ones, zeros) = (Tensor::filled(&[8], 1.0), Tensor::zeros(&[8]));
    let oracle = layer_norm_rows(&layer_norm_rows(&v_hat, &ones, &zeros), &ones, &zeros);
    assert!(max_diff(&out, &oracle) < 1e-12);
}

#[test]
fn constant_rows_are_set_by_biases() {
    let mut model = Model::new(config(1, 2, AlphaMode::Fixed(1.5)), 8).unwrap();
    let bias = Tensor::vector((0..8).map(|k| k as f64 * 0.1).collect());
    *model.params.get_mut("enc.0.ln_out.bias").unwrap() = bias.clone();
    for name in ["b1", "b2"] {
        model
            .params
            .get_mut(&format!("enc.0.ffn.{name}"))
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    let v_hat = Tensor::filled(&[2, 8], 3.0);
    let out = run(&model, |t, pv| {
        let x = t.constant(v_hat.clone());
        encoder::encoder_block(t, pv, &model.config, 0, x)
    });
    for i in 0..2 {
        for (a, b) in out.row(i).iter().zip(bias.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_layers_return_embeddings_and_one_layer_composes() {
    let input = GraphInput {
        labels: vec![4, 5, 6],
        mask: chain_mask(3),
        valid: vec![true; 3],
    };
    let model0 = Model::new(config(0, 2, AlphaMode::Fixed(1.5)), 9).unwrap();
    let v0 = run(&model0, |t, pv| {
        encoder::embed_vertices(t, pv, &model0.config, &input)
    });
    assert_eq!(model0.encode(&input).unwrap(), v0);

    let model1 = Model::new(config(1, 2, AlphaMode::Fixed(1.5)), 9).unwrap();
    let composed = run(&model1, |t, pv| {
        let v = encoder::embed_vertices(t, pv, &model1.config, &input)?;
        let v_hat = encoder::multi_head_graph_attention(t, pv, &model1.config, 0, v, &input.mask)?;
        encoder::encoder_block(t, pv, &model1.config, 0, v_hat)
    });
    assert_eq!(model1.encode(&input).unwrap(), composed);
}

#[test]
fn embedding_is_label_plus_rank_row() {
    let mut model = Model::new(config(1, 2, AlphaMode::Fixed(1.5)), 10).unwrap();
    model
        .params
        .get_mut("enc.label_embedding")
        .unwrap()
        .data_mut()
        .fill(0.0);
    model
        .params
        .get_mut("enc.positional")
        .unwrap()
        .data_mut()
        .fill(0.0);
    let single = GraphInput {
        labels: vec![4],
        mask: Mask::full(1, 1),
        valid: vec![true],
    };
    let out = run(&model, |t, pv| {
        encoder::embed_vertices(t, pv, &model.config, &single)
    });
    assert!(out.data().iter().all(|&x| x == 0.0));

    let model = Model::new(config(1, 2, AlphaMode::Fixed(1.5)), 10).unwrap();
    let twice = GraphInput {
        labels: vec![4, 4],
        mask: Mask::full(2, 2),
        valid: vec![true, true],
    };
    let out = run(&model, |t, pv| {
        encoder::embed_vertices(t, pv, &model.config, &twice)
    });
    let pos = param(&model, "enc.positional");
    for k in 0..8 {
        let diff = out.get(1, k) - out.get(0, k);
        assert!((diff - (pos.get(1, k) - pos.get(0, k))).abs() < 1e-12);
    }
}

#[test]
fn oversized_graph_is_a_capacity_error() {
    let model = Model::new(config(1, 2, AlphaMode::Fixed(1.5)), 11).unwrap();
    let input = GraphInput {
        labels: vec![4; 13],
        mask: Mask::full(13, 13),
        valid: vec![true; 13],
    };
    assert!(matches!(
        model.encode(&input),
        Err(sgst::Error::Capacity {
            limit: 12,
            got: 13,
            ..
        })
    ));
}

fn obj(id: &str, label: &str, attrs: &[&str]) -> RawObject {
    RawObject {
        id: id.into(),
        label: label.into(),
        attributes: attrs.iter().map(|s| s.to_string()).collect(),
    }
}

fn rel(s: &str, p: &str, o: &str) -> RawRelation {
    RawRelation {
        subject: s.into(),
        predicate: p.into(),
        object: o.into(),
    }
}

#[test]
fn rank_assignment_matches_golden_file() {
    let golden: serde_json::Value =
        serde_json::from_str(include_str!("data/rank_golden.json")).unwrap();
    for case in golden.as_array().unwrap() {
        let raw: RawSceneGraph = serde_json::from_value(case["graph"].clone()).unwrap();
        let graph = SceneGraph::from_raw(&raw).unwrap();
        let labels: Vec<&str> = graph.labels().collect();
        let expected: Vec<&str> = case["ranks"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        assert_eq!(labels, expected, "{}", case["name"]);
    }
}

#[test]
fn two_layers_propagate_two_hops_only() {
    // Chain a -> r -> b -> s -> c without the global vertex: five vertices in
    // a path. Two layers reach two hops; vertex 0 cannot see vertex 3 or 4.
    let raw = RawSceneGraph {
        objects: vec![
            obj("a", "man", &[]),
            obj("b", "dog", &[]),
            obj("c", "cat", &[]),
        ],
        relations: vec![rel("a", "near", "b"), rel("b", "near", "c")],
    };
    let graph = sgst::graph::rewrite_relations(&raw).unwrap();
    let vocab = Vocabulary::build(["<global>", "man", "dog", "cat", "near"]);
    let input = GraphInput::from_graph(&graph, &vocab, Default::default());
    let model = Model::new(
        ModelConfig {
            label_vocab: vocab.len(),
            ..config(2, 2, AlphaMode::Softmax)
        },
        12,
    )
    .unwrap();
    let base_v = run(&model, |t, pv| {
        encoder::embed_vertices(t, pv, &model.config, &input)
    });
    let encode = |v: &Tensor| {
        run(&model, |t, pv| {
            let x = t.constant(v.clone());
            encoder::encode_embedded(t, pv, &model.config, x, &input.mask)
        })
    };
    let base = encode(&base_v);
    // Index order: objects first (a, b, c), then relation vertices.
    let order: Vec<&str> = graph.labels().collect();
    assert_eq!(order, ["man", "dog", "cat", "near", "near"]);
    let hops = |i: usize, j: usize| {
        // Path: a(0) - r1(3) - b(1) - r2(4) - c(2).
        let pos = [0usize, 2, 4, 1, 3];
        pos[i].abs_diff(pos[j])
    };
    for j in 0..5 {
        let mut v = base_v.clone();
        v.row_mut(j)[0] += 0.5;
        let out = encode(&v);
        for i in 0..5 {
            let changed = out.row(i) != base.row(i);
            assert_eq!(changed, hops(i, j) <= 2, "vertex {i} after perturbing {j}");
        }
    }
}

#[test]
fn permuting_vertices_permutes_outputs() {
    let model = Model::new(config(2, 2, AlphaMode::Fixed(1.5)), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = 6;
    let v = Tensor::randn(&[m, 8], 1.0, &mut rng);
    let mask = Mask::from_fn(m, m, |i, j| i == j || (i * j) % 4 == 1 || (i + j) == 5);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let pv_rows: Vec<Vec<f64>> = perm.iter().map(|&p| v.row(p).to_vec()).collect();
    let pmask = Mask::from_fn(m, m, |i, j| mask.get(perm[i], perm[j]));
    let enc = |v: &Tensor, mask: &Mask| {
        run(&model, |t, pv| {
            let x = t.constant(v.clone());
            encoder::encode_embedded(t, pv, &model.config, x, mask)
        })
    };
    let out = enc(&v, &mask);
    let pout = enc(&Tensor::from_rows(&pv_rows), &pmask);
    for (i, &p) in perm.iter().enumerate() {
        assert!(
            max_diff(
                &Tensor::vector(pout.row(i).to_vec()),
                &Tensor::vector(out.row(p).to_vec())
            ) < 1e-12
        );
    }
}

#[test]
fn learned_alpha_is_shared_by_encoder_and_decoder() {
    let mut model = Model::new(config(1, 2, AlphaMode::Learned), 14).unwrap();
    let input = GraphInput {
        labels: vec![4, 5, 6, 7],
        mask: Mask::full(4, 4),
        valid: vec![true; 4],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let memory = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let tokens = [sgst::vocab::BOS, 4, 5, 6];
    let decode = |model: &Model| {
        run(model, |t, pv| {
            let mem = t.constant(memory.clone());
            sgst::model::decoder::decode(t, pv, &model.config, mem, &[true; 4], &tokens)
        })
    };
    let (enc, dec) = (model.encode(&input).unwrap(), decode(&model));
    model.params.get_mut("alpha.0.1").unwrap().data_mut()[0] = 3.0;
    assert_ne!(model.encode(&input).unwrap(), enc);
    assert_ne!(decode(&model), dec);
    let names: Vec<&str> = model
        .params
        .names()
        .filter(|n| n.starts_with("alpha."))
        .collect();
    assert_eq!(names, ["alpha.0.0", "alpha.0.1"]);
}
