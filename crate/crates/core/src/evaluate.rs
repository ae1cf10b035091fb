//! Top-1 accuracy of a network on a dataset.

use crate::compensation::{ScalingVectorSet, SharedProjections};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::model::{ModelSpec, ModelWeights};
use crate::nn::{CompContext, Network};

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

pub fn accuracy_of<T: Scalar>(net: &Network<'_, T>, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    if dataset.shape != net.input_shape() {
        return Err(Error::Shape(format!(
            "dataset shape {} does not match model input {}",
            dataset.shape,
            net.input_shape()
        )));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = dataset.batch::<T>(chunk);
        let pred = net.predict(x, chunk.len());
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Accuracy with optional compensation; inference runs in 32-bit floats.
pub fn evaluate_accuracy(
    spec: &ModelSpec,
    weights: &ModelWeights,
    comp: Option<(&SharedProjections, &ScalingVectorSet)>,
    act_bits: Option<u8>,
    dataset: &LabeledDataset,
) -> Result<f64> {
    let ctx = comp.map(|(projections, set)| CompContext { projections, set });
    let net: Network<f32> = Network::new(spec, weights, ctx, act_bits)?;
    accuracy_of(&net, dataset)
}

/// Accuracy relative to a drift-free reference.
pub fn normalized_accuracy(acc: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        acc / reference
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, Split, SyntheticConfig};
    use crate::model::{build_mlp, build_toy_resnet, LayerParams, Shape};
    use rand::seq::SliceRandom;

    #[test]
    fn single_correct_sample_scores_one() {
        let spec = build_mlp(Shape::new(2, 1, 1), &[], 2).unwrap();
        let weights = ModelWeights {
            layers: vec![LayerParams {
                weight: vec![1.0, 0.0, 0.0, 1.0],
                bias: vec![0.0, 0.0],
            }],
        };
        let ds = LabeledDataset::new(Shape::new(2, 1, 1), 2, Split::Eval, vec![0.2, 0.9], vec![1]).unwrap();
        assert_eq!(evaluate_accuracy(&spec, &weights, None, None, &ds).unwrap(), 1.0);
        assert_eq!(normalized_accuracy(0.75, 0.75), 1.0);
    }

    #[test]
    fn permuted_labels_give_chance_accuracy() {
        let cfg = SyntheticConfig {
            train_per_class: 1,
            eval_per_class: 100,
            ..Default::default()
        };
        let (_, mut eval) = make_synthetic_dataset(&cfg).unwrap();
        let mut rng = crate::rng::rng_from_seed(4);
        eval.labels.shuffle(&mut rng);
        let spec = build_toy_resnet(8, 1, 10, cfg.shape).unwrap();
        let weights = ModelWeights::init(&spec, 9);
        let acc = evaluate_accuracy(&spec, &weights, None, Some(4), &eval).unwrap();
        let n = eval.len() as f64;
        let sd = (0.1 * 0.9 / n).sqrt();
        assert!((acc - 0.1).abs() < 3.0 * sd, "accuracy {acc} vs chance 0.1 ± {}", 3.0 * sd);
    }

    #[test]
    fn accuracy_ignores_dataset_order() {
        let cfg = SyntheticConfig {
            train_per_class: 1,
            eval_per_class: 20,
            ..Default::default()
        };
        let (_, eval) = make_synthetic_dataset(&cfg).unwrap();
        let spec = build_toy_resnet(4, 1, 10, cfg.shape).unwrap();
        let weights = ModelWeights::init(&spec, 2);
        let a = evaluate_accuracy(&spec, &weights, None, Some(4), &eval).unwrap();
        let mut order: Vec<usize> = (0..eval.len()).collect();
        order.reverse();
        let n = eval.shape.numel();
        let mut rev = eval.clone();
        rev.images = order.iter().flat_map(|&i| eval.images[i * n..(i + 1) * n].to_vec()).collect();
        rev.labels = order.iter().map(|&i| eval.labels[i]).collect();
        assert_eq!(evaluate_accuracy(&spec, &weights, None, Some(4), &rev).unwrap(), a);
    }
}
