//! The assembled super-resolution network, its configuration and
//! checkpoint format.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::HimeConfig;
pub use network::{estimate_flows, ForwardGrads, HimeModel, StageGrads};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{AggregationMode, RfaMode};
    use crate::diffops::{bicubic_resize, Scale};
    use crate::Tensor;

    fn image(shape: [usize; 4], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |n, c, y, x| {
            0.5 + 0.4 * ((n * 31 + c * 7) as f64 + y as f64 * 0.37 + x as f64 * 0.23 + seed).sin()
        })
    }

    #[test]
    fn same_seed_same_registry_and_grads_start_zero() {
        let a = HimeModel::<f32>::new(HimeConfig::toy(4)).unwrap();
        let b = HimeModel::<f32>::new(HimeConfig::toy(4)).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(!a.params().is_empty());
        assert!(a.params().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
        let c = HimeModel::<f32>::new(HimeConfig {
            seed: 1,
            ..HimeConfig::toy(4)
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn parameter_count_grows_with_reconstructor_depth() {
        let count = |k_r| {
            HimeModel::<f32>::new(HimeConfig {
                k_r,
                ..HimeConfig::toy(4)
            })
            .unwrap()
            .params()
            .num_scalars()
        };
        assert!(count(0) < count(1) && count(1) < count(2));
    }

    #[test]
    fn upsampling_stages_follow_scale() {
        for (s, stages) in [(2, 1), (4, 2), (8, 3)] {
            let m = HimeModel::<f32>::new(HimeConfig::toy(s)).unwrap();
            let ups = m
                .params()
                .iter()
                .filter(|p| p.id.starts_with("reconstruct.up") && p.id.ends_with(".weight"))
                .count();
            assert_eq!(ups, stages);
        }
    }

    #[test]
    fn stage_shapes() {
        let m = HimeModel::<f64>::new(HimeConfig::toy(4)).unwrap();
        let lr = image([1, 3, 16, 16], 0.0);
        assert_eq!(m.extract_lr(&lr).unwrap().shape(), [1, 16, 16, 16]);
        let r = image([1, 3, 64, 64], 1.0);
        assert_eq!(m.extract_ref(&r).unwrap().shape(), [1, 16, 16, 16]);
        assert!(m.extract_ref(&image([1, 3, 62, 64], 1.0)).is_err());
        assert!(m.extract_lr(&image([1, 1, 16, 16], 1.0)).is_err());
        let refs: Vec<_> = (0..3).map(|i| image([1, 3, 64, 64], i as f64)).collect();
        assert_eq!(m.forward(&lr, &refs, None).unwrap().shape(), [1, 3, 64, 64]);
    }

    #[test]
    fn zero_reconstructor_gives_bicubic() {
        let mut m = HimeModel::<f64>::new(HimeConfig::toy(4)).unwrap();
        m.zero_reconstructor();
        let lr = image([1, 3, 8, 8], 0.0);
        let refs = vec![image([1, 3, 32, 32], 2.0)];
        let sr = m.forward(&lr, &refs, None).unwrap();
        assert_eq!(sr, bicubic_resize(&lr, Scale::up(4).unwrap()).unwrap());
    }

    #[test]
    fn references_change_the_output() {
        let m = HimeModel::<f64>::new(HimeConfig::toy(4)).unwrap();
        let lr = image([1, 3, 8, 8], 0.0);
        let refs: Vec<_> = (0..3).map(|i| image([1, 3, 32, 32], 1.0 + i as f64)).collect();
        let a = m.forward(&lr, &[], None).unwrap();
        let b = m.forward(&lr, &refs, None).unwrap();
        assert!(a.zip_map(&b, |u, v| u - v).unwrap().max_abs() > 1e-6);
    }

    #[test]
    fn reference_order_does_not_matter() {
        let m = HimeModel::<f64>::new(HimeConfig::toy(2)).unwrap();
        let lr = image([1, 3, 6, 6], 0.0);
        let refs: Vec<_> = (0..3).map(|i| image([1, 3, 12, 12], 1.0 + i as f64)).collect();
        let a = m.forward(&lr, &refs, None).unwrap();
        let rev: Vec<_> = refs.iter().rev().cloned().collect();
        assert_eq!(a, m.forward(&lr, &rev, None).unwrap());
    }

    #[test]
    fn flow_count_is_checked() {
        let cfg = HimeConfig {
            rfa_mode: RfaMode::Large,
            ..HimeConfig::toy(2)
        };
        let m = HimeModel::<f64>::new(cfg).unwrap();
        let lr = image([1, 3, 6, 6], 0.0);
        let refs = vec![image([1, 3, 12, 12], 1.0); 2];
        let flows = vec![Tensor::zeros([1, 2, 6, 6])];
        assert!(matches!(
            m.forward(&lr, &refs, Some(&flows)),
            Err(crate::Error::Configuration(_))
        ));
        let flows = vec![Tensor::zeros([1, 2, 6, 6]); 2];
        m.forward(&lr, &refs, Some(&flows)).unwrap();
        // no references: no flows needed
        m.forward(&lr, &[], None).unwrap();
    }

    #[test]
    fn baseline_aggregations_run() {
        for aggregation in [AggregationMode::Average, AggregationMode::MaxPool] {
            let m = HimeModel::<f64>::new(HimeConfig {
                aggregation,
                ..HimeConfig::toy(2)
            })
            .unwrap();
            let lr = image([1, 3, 6, 6], 0.0);
            let refs = vec![image([1, 3, 12, 12], 1.0), image([1, 3, 12, 12], 2.0)];
            let (sr, back) = m.forward_vjp(&lr, &refs, None).unwrap();
            let g = back(&sr.map(|_| 1.0)).unwrap();
            assert_eq!(g.refs.len(), 2);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = HimeModel::<f32>::new(HimeConfig {
            seed: 9,
            ..HimeConfig::toy(4)
        })
        .unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), m.params());
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint::<f32>(b"HTF1....").is_err());
    }
}
