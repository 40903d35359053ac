use mpaf_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn rows() -> impl Strategy<Value = (usize, Vec<f32>)> {
    (1usize..6, 1usize..17).prop_flat_map(|(r, c)| {
        (Just(c), prop::collection::vec(-20.0f32..20.0, r * c))
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((cols, data) in rows()) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[data.len() / cols, cols], data).unwrap());
        let y = x.softmax().to_tensor();
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm((cols, data) in rows()) {
        prop_assume!(data.chunks(cols).all(|r| r.iter().map(|v| v * v).sum::<f32>() > 1e-4));
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[data.len() / cols, cols], data).unwrap());
        let y = x.l2_normalize().to_tensor();
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().map(|v| v * v).sum::<f32>().sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_similarity_is_bounded(a in prop::collection::vec(-5.0f32..5.0, 1..16), seed in 0u32..1000) {
        let b: Vec<f32> = a.iter().enumerate().map(|(i, v)| ((i as u32 * 7 + seed) % 11) as f32 - 5.0 + v * 0.1).collect();
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(a).unwrap())
            .cosine_similarity(&tape.constant(Tensor::vector(b).unwrap()))
            .unwrap()
            .item()
            .unwrap();
        prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
    }
}
