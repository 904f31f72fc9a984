//! Random layer stacks and inputs must either run or fail with an error, never panic.

use l2caf_core::{Error, HeadKind, LayerSpec, NetworkModel, Tensor};
use proptest::prelude::*;

fn layer() -> impl Strategy<Value = LayerSpec> {
    prop_oneof![
        (0usize..4, 0usize..4, 0usize..3, 0usize..3).prop_map(|(k, c, s, p)| LayerSpec::conv(k, c, s, p)),
        Just(LayerSpec::Relu),
        Just(LayerSpec::Gap),
        Just(LayerSpec::Flatten),
        (0usize..4).prop_map(|d| LayerSpec::Dense { out_dim: d }),
        Just(LayerSpec::EmbedNormalize),
        (0usize..3).prop_map(|h| LayerSpec::RecurrentFuse { hidden_dim: h }),
    ]
}

fn head() -> impl Strategy<Value = HeadKind> {
    prop_oneof![(0usize..4).prop_map(HeadKind::Logits), (0usize..4).prop_map(HeadKind::Embedding)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 512, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn networks_validate_or_run(
        dims in proptest::collection::vec(0usize..6, 3),
        frames in proptest::option::of(0usize..3),
        layers in proptest::collection::vec(layer(), 0..6),
        head in head(),
        seed in 0u64..100,
    ) {
        let m = match NetworkModel::new(dims.clone(), frames, layers, head, seed) {
            Ok(m) => m,
            Err(e) => {
                prop_assert!(matches!(e, Error::Shape { .. } | Error::InvalidArgument(_)), "{e}");
                return Ok(());
            }
        };
        let shape = m.full_input_shape();
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        match m.predict(&x) {
            Ok(out) => prop_assert_eq!(out.len(), head.size()),
            Err(e) => prop_assert!(matches!(e, Error::DegenerateFilter | Error::NonFinite(_)), "{e}"),
        }
        // A wrong-sized input is rejected.
        let bad = Tensor::zeros(&[dims[0] + 1, dims[1], dims[2]]);
        prop_assert!(m.predict(&bad).is_err());
    }

    #[test]
    fn tensor_construction_checks_lengths(shape in proptest::collection::vec(1usize..4, 0..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n + extra]).is_err());
        let mut with_zero = shape;
        with_zero.push(0);
        prop_assert!(Tensor::new(with_zero, Vec::new()).is_err());
    }
}
