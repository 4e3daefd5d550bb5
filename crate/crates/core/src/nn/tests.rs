use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{Tape, Tensor, Var};
use crate::testutil::{check_grads, random, store_for};

fn check_layer<F>(store: &ParamStore<f64>, input: &Tensor<f64>, f: F, tol: f64)
where
    F: for<'t> Fn(&Ctx<'t, f64>, &Var<'t, f64>) -> crate::Result<Var<'t, f64>>,
{
    check_grads(store, std::slice::from_ref(input), |cx, xs| f(cx, &xs[0]), tol, usize::MAX);
}

#[test]
fn store_init_is_seeded_and_ordered() {
    let conv = Conv2d::new("c", 3, 4, 3);
    let a: ParamStore<f32> = ParamStore::init(&conv.param_specs(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b: ParamStore<f32> = ParamStore::init(&conv.param_specs(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.names().collect::<Vec<_>>(), ["c.bias", "c.weight"]);
    assert!(a.get("c.bias").unwrap().data().iter().all(|&v| v == 0.0));
    let bound = 1.0 / 27f32.sqrt();
    assert!(a.get("c.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn duplicate_name_with_other_shape_is_rejected() {
    let mut specs = Conv2d::new("c", 3, 4, 3).param_specs();
    specs.extend(Conv2d::new("c", 3, 4, 1).param_specs());
    let err = ParamStore::<f32>::init(&specs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, crate::Error::DuplicateParam(n) if n == "c.weight"));
}

#[test]
fn tied_names_share_one_tensor() {
    let mut specs = Conv2d::new("c", 3, 4, 3).param_specs();
    specs.extend(Conv2d::new("c", 3, 4, 3).param_specs());
    let s = ParamStore::<f32>::init(&specs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(s.len(), 2);
}

#[test]
fn unknown_param_is_an_error() {
    let tape = Tape::<f32>::new();
    let store = ParamStore::default();
    let cx = Ctx::new(&tape, &store);
    let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    assert!(matches!(Conv2d::new("c", 3, 3, 3).forward(&cx, &x), Err(crate::Error::UnknownParam(_))));
}

#[test]
fn conv_rejects_wrong_channel_count() {
    let conv = Conv2d::new("c", 3, 4, 3);
    let store = store_for(&conv, 0, 0.5);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    assert!(conv.forward(&cx, &tape.constant(Tensor::zeros(vec![1, 2, 4, 4]))).is_err());
}

#[test]
fn dsconv_with_delta_and_identity_is_exact_identity() {
    let ds = DsConv::new("d", 3, 3, 3);
    let mut store = ParamStore::<f32>::init(&ds.param_specs(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut delta = vec![0.0; 27];
    for c in 0..3 {
        delta[c * 9 + 4] = 1.0;
    }
    store.insert("d.dw.weight", Tensor::new(vec![3, 1, 3, 3], delta).unwrap());
    let mut eye = vec![0.0; 9];
    for c in 0..3 {
        eye[c * 3 + c] = 1.0;
    }
    store.insert("d.pw.weight", Tensor::new(vec![3, 3, 1, 1], eye).unwrap());
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store);
    let x = random(&[2, 3, 5, 6], 3).cast::<f32>();
    let y = ds.forward(&cx, &tape.constant(x.clone())).unwrap();
    assert_eq!(y.value(), &x);
}

#[test]
fn dsconv_has_fewer_params_than_standard() {
    let std = Conv2d::new("c", 48, 48, 3).num_params();
    let ds = DsConv::new("d", 48, 48, 3).num_params();
    assert_eq!(std, 48 * 48 * 9 + 48);
    assert_eq!(ds, 48 * 9 + 48 + 48 * 48 + 48);
    assert!(ds < std);
}

#[test]
fn channel_attention_requires_divisible_reduction() {
    assert!(ChannelAttention::new("ca", 6, 4).is_err());
    assert!(ChannelAttention::new("ca", 8, 0).is_err());
    assert!(ChannelAttention::new("ca", 8, 4).is_ok());
}

#[test]
fn channel_attention_gate_is_in_unit_interval() {
    let ca = ChannelAttention::new("ca", 4, 2).unwrap();
    let store = store_for(&ca, 2, 3.0);
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store);
    let g = ca.gate(&cx, &tape.constant(random(&[2, 4, 3, 3], 5))).unwrap();
    assert_eq!(g.shape(), &[2, 4, 1, 1]);
    assert!(g.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn rcab_is_identity_at_init() {
    for sep in [false, true] {
        let rcab = Rcab::new("r", 4, 2, sep).unwrap();
        let store = ParamStore::<f32>::init(&rcab.param_specs(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, &store);
        let x = random(&[1, 4, 6, 6], 1).cast::<f32>();
        assert_eq!(rcab.forward(&cx, &tape.constant(x.clone())).unwrap().value(), &x);
    }
}

#[test]
fn transformer_block_is_identity_at_init() {
    let block = TransformerBlock::new("t", 4, 2, 2).unwrap();
    let store = ParamStore::<f32>::init(&block.param_specs(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store);
    let x = random(&[1, 4, 4, 4], 1).cast::<f32>();
    assert_eq!(block.forward(&cx, &tape.constant(x.clone())).unwrap().value(), &x);
}

#[test]
fn attention_rows_are_distributions() {
    let attn = TransposedAttention::new("a", 6, 3).unwrap();
    let store = store_for(&attn, 4, 0.8);
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store).record_attention();
    let x = tape.constant(random(&[2, 6, 4, 5], 7));
    attn.forward(&cx, &x, &x, &x).unwrap();
    let maps = cx.attention_maps();
    assert_eq!(maps.len(), 1);
    assert_eq!(maps[0].layer, "a");
    assert_eq!(maps[0].map.shape(), &[2, 3, 2, 2]);
    for row in maps[0].map.data().chunks(2) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_rejects_heads_that_do_not_divide() {
    assert!(TransposedAttention::new("a", 6, 4).is_err());
}

#[test]
fn cross_attention_reconciles_resolutions() {
    let attn = TransposedAttention::cross("m", 4, 2, [3, 3, 3], [2, 1, 2]).unwrap();
    let store = store_for(&attn, 1, 0.5);
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store);
    let full = tape.constant(random(&[1, 3, 8, 8], 1));
    let sub = tape.constant(random(&[1, 3, 4, 4], 2));
    let y = attn.forward(&cx, &full, &sub, &full).unwrap();
    assert_eq!(y.shape(), &[1, 4, 4, 4]);
    assert!(attn.forward(&cx, &full, &full, &full).is_err());
}

#[test]
fn layer_norm_output_is_standardized() {
    let ln = LayerNorm2d::new("n", 5);
    let store = ParamStore::<f64>::init(&ln.param_specs(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store);
    let y = ln.forward(&cx, &tape.constant(random(&[1, 5, 2, 2], 3))).unwrap();
    let d = y.value().data();
    for p in 0..4 {
        let col: Vec<f64> = (0..5).map(|c| d[c * 4 + p]).collect();
        let mean = col.iter().sum::<f64>() / 5.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn conv_gradients() {
    let conv = Conv2d::new("c", 2, 3, 3).with_stride(2, 1);
    check_layer(&store_for(&conv, 1, 0.5), &random(&[1, 2, 7, 7], 2), |cx, x| conv.forward(cx, x), 1e-6);
}

#[test]
fn dsconv_gradients() {
    let ds = DsConv::new("d", 3, 2, 3);
    check_layer(&store_for(&ds, 1, 0.5), &random(&[1, 3, 5, 4], 2), |cx, x| ds.forward(cx, x), 1e-6);
}

#[test]
fn channel_attention_gradients() {
    let ca = ChannelAttention::new("ca", 4, 2).unwrap();
    check_layer(&store_for(&ca, 3, 0.8), &random(&[2, 4, 3, 3], 4), |cx, x| ca.forward(cx, x), 1e-5);
}

#[test]
fn layer_norm_gradients() {
    let ln = LayerNorm2d::new("n", 3);
    check_layer(&store_for(&ln, 3, 1.0), &random(&[1, 3, 3, 2], 4), |cx, x| ln.forward(cx, x), 1e-5);
}

#[test]
fn attention_gradients() {
    let attn = TransposedAttention::new("a", 4, 2).unwrap();
    check_layer(
        &store_for(&attn, 5, 0.6),
        &random(&[1, 4, 3, 3], 6),
        |cx, x| attn.forward(cx, x, x, x),
        1e-5,
    );
}

#[test]
fn strided_embedding_gradients() {
    let emb = Embedding::new("e", 2, 3, 2);
    check_layer(&store_for(&emb, 5, 0.6), &random(&[1, 2, 4, 4], 6), |cx, x| emb.forward(cx, x), 1e-6);
}

#[test]
fn feed_forward_gradients() {
    let ffn = FeedForward::new("f", 2, 2);
    check_layer(&store_for(&ffn, 7, 0.6), &random(&[1, 2, 3, 3], 8), |cx, x| ffn.forward(cx, x), 1e-5);
}
