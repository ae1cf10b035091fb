//! Fixtures shared by the benchmarks.

use driftcomp::compensation::{init_shared_projections, ScalingVectorSet};
use driftcomp::data::{make_synthetic_dataset, SyntheticConfig};
use driftcomp::model::build_toy_resnet;
use driftcomp::{Backbone, LabeledDataset, ModelWeights, QuantScheme, Shape, SharedProjections};

pub struct Fixture {
    pub backbone: Backbone,
    pub projections: SharedProjections,
    /// Non-trivial vectors so the compensation path is not skipped.
    pub set: ScalingVectorSet,
    pub eval: LabeledDataset,
}

/// Untrained width-8 toy network at 16×16 with a small eval split.
pub fn toy_fixture() -> Fixture {
    let shape = Shape::new(3, 16, 16);
    let spec = build_toy_resnet(8, 1, 10, shape).expect("valid topology");
    let backbone = Backbone::quantize(&spec, &ModelWeights::init(&spec, 1), QuantScheme::default()).expect("quantizes");
    let (d_in, d_out) = spec.max_comp_dims();
    let projections = init_shared_projections(1, d_in, d_out, 2).expect("projections");
    let c_outs: Vec<usize> = spec.compensated_dims().iter().map(|d| d.c_out).collect();
    let mut set = ScalingVectorSet::initial(1, 1.5, 1, &c_outs);
    for l in &mut set.layers {
        l.b_vec.iter_mut().for_each(|b| *b = 0.01);
    }
    let (_, eval) = make_synthetic_dataset(&SyntheticConfig {
        shape,
        train_per_class: 1,
        eval_per_class: 10,
        ..Default::default()
    })
    .expect("synthetic data");
    Fixture {
        backbone,
        projections,
        set,
        eval,
    }
}
