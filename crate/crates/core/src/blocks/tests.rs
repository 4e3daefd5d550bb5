use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::testutil::{check_grads, random, store_for};

fn desk() -> BranchConfig {
    BranchConfig {
        channels: 8,
        rtb_depth: 2,
        heads: 2,
        ffn_expansion: 2,
        edb_stages: 6,
        rcab_per_stage: 1,
        reduction: 4,
        dsc_encoder: true,
    }
}

fn fresh<T: Scalar>(m: &impl Module) -> ParamStore<T> {
    ParamStore::init(&m.param_specs(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn config_validation() {
    assert!(desk().validate().is_ok());
    assert!(BranchConfig { heads: 3, ..desk() }.validate().is_err());
    assert!(BranchConfig { edb_stages: 5, ..desk() }.validate().is_err());
    assert!(BranchConfig { reduction: 3, ..desk() }.validate().is_err());
    assert_eq!(desk().spatial_multiple(), 4);
}

#[test]
fn rtb_is_identity_at_init_and_keeps_shape() {
    let rtb = Rtb::new("rtb", &desk()).unwrap();
    let store = fresh::<f32>(&rtb);
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store);
    for (h, w) in [(4, 4), (5, 7)] {
        let x = random(&[1, 8, h, w], 1).cast::<f32>();
        assert_eq!(rtb.forward(&cx, &tape.constant(x.clone())).unwrap().value(), &x);
    }
}

#[test]
fn edb_keeps_shape_and_rejects_bad_extents() {
    let edb = Edb::new("edb", &desk()).unwrap();
    let store = store_for(&edb, 1, 0.3);
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store);
    let y = edb.forward(&cx, &tape.constant(random(&[2, 8, 8, 12], 1))).unwrap();
    assert_eq!(y.shape(), &[2, 8, 8, 12]);
    let err = edb.forward(&cx, &tape.constant(random(&[1, 8, 6, 8], 1))).unwrap_err();
    assert!(err.to_string().contains("pad to 8x8"), "{err}");
}

#[test]
fn edb_encoder_is_separable_only_when_asked() {
    let sep = Edb::new("e", &desk()).unwrap().param_specs();
    let std = Edb::new("e", &BranchConfig { dsc_encoder: false, ..desk() }).unwrap().param_specs();
    assert!(sep.iter().any(|p| p.name == "e.stage0.rcab0.conv1.dw.weight"));
    assert!(sep.iter().any(|p| p.name == "e.stage3.rcab0.conv1.weight"));
    assert!(std.iter().any(|p| p.name == "e.stage0.rcab0.conv1.weight"));
    let count = |v: &[ParamSpec]| v.iter().map(ParamSpec::numel).sum::<usize>();
    assert!(count(&sep) < count(&std));
}

#[test]
fn hfb_validates_inputs() {
    assert!(Hfb::new("f", 8, 1, 4).is_err());
    let hfb = Hfb::new("f", 4, 2, 2).unwrap();
    let store = store_for(&hfb, 1, 0.5);
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store);
    let a = tape.constant(random(&[1, 4, 4, 4], 1));
    let b = tape.constant(random(&[1, 4, 4, 2], 2));
    assert!(hfb.forward(&cx, &[a.clone()]).is_err());
    assert!(hfb.forward(&cx, &[a.clone(), b]).is_err());
    assert_eq!(hfb.forward(&cx, &[a.clone(), a]).unwrap().shape(), &[1, 4, 4, 4]);
}

#[test]
fn hfb_is_order_sensitive() {
    let hfb = Hfb::new("f", 4, 2, 2).unwrap();
    let store = store_for(&hfb, 3, 0.5);
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store);
    let a = tape.constant(random(&[1, 4, 4, 4], 1));
    let b = tape.constant(random(&[1, 4, 4, 4], 2));
    let ab = hfb.forward(&cx, &[a.clone(), b.clone()]).unwrap();
    let ba = hfb.forward(&cx, &[b, a]).unwrap();
    assert!(ab.value().max_abs_diff(ba.value()) > 1e-6);
}

#[test]
fn hfb_output_width_is_independent_of_input_count() {
    for k in 2..5 {
        let hfb = Hfb::new("f", 4, k, 2).unwrap();
        let store = store_for(&hfb, 3, 0.5);
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, &store);
        let xs: Vec<_> = (0..k).map(|i| tape.constant(random(&[1, 4, 3, 3], i as u64))).collect();
        assert_eq!(hfb.forward(&cx, &xs).unwrap().shape(), &[1, 4, 3, 3]);
    }
}

#[test]
fn hfb_with_identity_fuse_and_zero_gate_halves_the_mix() {
    let hfb = Hfb::new("f", 2, 2, 2).unwrap();
    let mut store = fresh::<f64>(&hfb);
    let mut delta = vec![0.0; 4 * 9];
    for c in 0..4 {
        delta[c * 9 + 4] = 1.0;
    }
    store.insert("f.fuse.dw.weight", Tensor::new(vec![4, 1, 3, 3], delta).unwrap());
    // output channel c sums input channels c and c + 2
    let pw = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
    store.insert("f.fuse.pw.weight", Tensor::new(vec![2, 4, 1, 1], pw).unwrap());
    for name in ["f.ca.squeeze.weight", "f.ca.excite.weight"] {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.insert(name, Tensor::zeros(shape));
    }
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store);
    let x = random(&[1, 2, 3, 3], 4);
    let v = tape.constant(x.clone());
    let y = hfb.forward(&cx, &[v.clone(), v]).unwrap();
    assert!(y.value().max_abs_diff(&x) < 1e-15);
}

#[test]
fn mam_shapes_and_attention_maps() {
    let mam = Mam::new("mam", &desk(), 2, false).unwrap();
    let store = store_for(&mam, 5, 0.4);
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store).record_attention();
    let full = tape.constant(random(&[1, 3, 32, 32], 1));
    let rain = tape.constant(random(&[1, 3, 16, 16], 2));
    let bg = tape.constant(random(&[1, 3, 16, 16], 3));
    let t = mam.forward(&cx, &rain, &full, &bg).unwrap();
    for v in [&t.f_r_s, &t.f_rain, &t.f_b_s, &t.f_bt, &t.f_mam] {
        assert_eq!(v.shape(), &[1, 8, 16, 16]);
    }
    let maps = cx.attention_maps();
    assert_eq!(maps.len(), 1);
    assert_eq!(maps[0].map.shape(), &[1, 2, 4, 4]);
    for row in maps[0].map.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn mam_rejects_extent_ratio_mismatch() {
    let mam = Mam::new("mam", &desk(), 2, false).unwrap();
    let store = store_for(&mam, 5, 0.4);
    let tape = Tape::new();
    let cx = Ctx::inference(&tape, &store);
    let full = tape.constant(random(&[1, 3, 32, 32], 1));
    let sub = tape.constant(random(&[1, 3, 8, 8], 2));
    assert!(mam.forward(&cx, &sub, &full, &sub).is_err());
    assert!(Mam::new("mam", &desk(), 1, false).is_err());
}

#[test]
fn mam_swap_changes_the_key_source() {
    let tape = Tape::new();
    let full = tape.constant(random(&[1, 3, 16, 16], 1));
    let sub = tape.constant(random(&[1, 3, 8, 8], 2));
    let mut outs = Vec::new();
    for swap in [false, true] {
        let mam = Mam::new("mam", &desk(), 2, swap).unwrap();
        let store = store_for(&mam, 5, 0.4);
        let cx = Ctx::inference(&tape, &store);
        outs.push(mam.forward(&cx, &sub, &full, &sub).unwrap().f_mam.to_tensor());
    }
    assert!(outs[0].max_abs_diff(&outs[1]) > 1e-6);
}

#[test]
fn rtb_gradients() {
    let cfg = BranchConfig { channels: 4, ..desk() };
    let rtb = Rtb::new("rtb", &cfg).unwrap();
    check_grads(&store_for(&rtb, 2, 0.4), &[random(&[1, 4, 4, 4], 3)], |cx, x| rtb.forward(cx, &x[0]), 1e-3, 6);
}

#[test]
fn edb_gradients() {
    let edb = Edb::new("edb", &desk()).unwrap();
    check_grads(&store_for(&edb, 2, 0.4), &[random(&[1, 8, 16, 16], 3)], |cx, x| edb.forward(cx, &x[0]), 1e-3, 4);
}

#[test]
fn hfb_gradients_with_three_inputs() {
    let hfb = Hfb::new("f", 4, 3, 2).unwrap();
    let inputs: Vec<_> = (0..3).map(|i| random(&[1, 4, 3, 3], i)).collect();
    check_grads(&store_for(&hfb, 2, 0.5), &inputs, |cx, x| hfb.forward(cx, x), 1e-4, usize::MAX);
}

#[test]
fn mam_gradients() {
    let mam = Mam::new("mam", &desk(), 2, false).unwrap();
    let inputs = [random(&[1, 3, 4, 4], 1), random(&[1, 3, 8, 8], 2), random(&[1, 3, 4, 4], 3)];
    check_grads(
        &store_for(&mam, 2, 0.5),
        &inputs,
        |cx, x| Ok(mam.forward(cx, &x[0], &x[1], &x[2])?.f_mam),
        1e-3,
        6,
    );
}
