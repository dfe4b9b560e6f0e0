use hime_core::diffops::{
    bicubic_resize, bilinear_warp, broadcast_flow_to_offsets, conv2d, deformable_conv, Conv2dParams, Scale,
};
use hime_core::model::{decode_checkpoint, load_checkpoint, save_checkpoint, HimeConfig, HimeModel};
use hime_core::tensor::{read_htf_file, write_htf_file};
use hime_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

#[test]
fn deformable_conv_with_zero_offsets_is_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in [1, 3, 5] {
        let x = random(&mut rng, [2, 3, 7, 6]);
        let p = Conv2dParams::same(random(&mut rng, [4, 3, k, k]), random(&mut rng, [1, 4, 1, 1])).unwrap();
        let off = Tensor::zeros([2, 2 * k * k, 7, 6]);
        let a = deformable_conv(&x, &p, &off).unwrap();
        let b = conv2d(&x, &p).unwrap();
        let err = a.zip_map(&b, |u, v| u - v).unwrap().max_abs();
        assert!(err <= 1e-12, "k={k}: {err}");
    }
}

#[test]
fn unit_deformable_conv_with_flow_offsets_is_warp() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, [1, 3, 8, 9]);
    let flow = Tensor::from_fn([1, 2, 8, 9], |_, _, _, _| rng.random_range(-2.5..2.5));
    let identity = Conv2dParams::same(
        Tensor::from_fn([3, 3, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 }),
        Tensor::zeros([1, 3, 1, 1]),
    )
    .unwrap();
    let off = broadcast_flow_to_offsets(&flow, 1).unwrap();
    let a = deformable_conv(&x, &identity, &off).unwrap();
    let b = bilinear_warp(&x, &flow).unwrap();
    assert!(a.zip_map(&b, |u, v| u - v).unwrap().max_abs() <= 1e-12);
}

#[test]
fn zero_weight_model_is_bicubic_upsampling() {
    for s in [2, 4] {
        let mut m = HimeModel::<f64>::new(HimeConfig::toy(s)).unwrap();
        m.zero_reconstructor();
        let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
        let lr = random(&mut rng, [1, 3, 5, 6]);
        let refs = vec![random(&mut rng, [1, 3, 5 * s, 6 * s]); 2];
        let up = bicubic_resize(&lr, Scale::up(s as u32).unwrap()).unwrap();
        assert_eq!(m.forward(&lr, &refs, None).unwrap(), up);
        assert_eq!(m.forward(&lr, &[], None).unwrap(), up);
    }
}

#[test]
fn files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random(&mut rng, [2, 3, 4, 5]);
    let path = dir.path().join("t.htf");
    write_htf_file(&t, &path).unwrap();
    assert_eq!(read_htf_file(&path).unwrap().into_tensor::<f64>(), t);
    let t32 = t.cast::<f32>();
    write_htf_file(&t32, &path).unwrap();
    assert_eq!(read_htf_file(&path).unwrap().into_tensor::<f32>(), t32);

    let m = HimeModel::<f32>::new(HimeConfig {
        seed: 11,
        ..HimeConfig::toy(4)
    })
    .unwrap();
    let ck = dir.path().join("m.hmc");
    save_checkpoint(&m, &ck).unwrap();
    let back = load_checkpoint::<f32>(&ck).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.config(), m.config());
    let bytes = std::fs::read(&ck).unwrap();
    assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() / 2]).is_err());
}
