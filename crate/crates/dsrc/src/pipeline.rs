//! High-level runs shared by the CLI and the evaluation harness.

use crate::autodiff::Graph;
use crate::data::LabeledDataset;
use crate::error::{DsrcError, Result};
use crate::network::{encode, init_params, DecoderState, EncoderState, NetworkSpec};
use crate::sparse::{SparseCodes, SparseCodingLayer, SparseMode};
use crate::tensor::Tensor;
use crate::train::{pretrain, train_joint, Checkpoint, JointResult, LossTrace, Stage, TrainConfig};

/// Output of the pretraining stage.
pub struct PretrainOutput {
    pub encoder: EncoderState,
    pub decoder: DecoderState,
    pub trace: LossTrace,
    pub checkpoint: Checkpoint,
}

pub fn pretrain_stage(
    dataset: &LabeledDataset,
    spec: &NetworkSpec,
    config: &TrainConfig,
) -> Result<PretrainOutput> {
    let (encoder, decoder) = init_params(spec, config.seed);
    let trace = pretrain(&encoder, &decoder, spec, dataset, config)?;
    let checkpoint = Checkpoint::capture(
        spec,
        config,
        Stage::Pretrained,
        trace.records.len() as u64,
        &encoder,
        &decoder,
        None,
    );
    Ok(PretrainOutput { encoder, decoder, trace, checkpoint })
}

/// Output of the joint stage, with codes extracted from the trained layer.
pub struct JointOutput {
    pub result: JointResult,
    pub codes: SparseCodes,
}

/// Run the joint stage from given encoder/decoder states and extract the
/// sparse codes together with the final embeddings.
pub fn joint_stage(
    encoder: &EncoderState,
    decoder: &DecoderState,
    dataset: &LabeledDataset,
    spec: &NetworkSpec,
    config: &TrainConfig,
    mode: SparseMode,
) -> Result<JointOutput> {
    let n = dataset.train_idx.len();
    let m = dataset.test_idx.len();
    if n == 0 || m == 0 {
        return Err(DsrcError::InvalidInput(
            "joint training needs non-empty train and test partitions".into(),
        ));
    }
    let layer = match mode {
        SparseMode::Structured => SparseCodingLayer::structured(n, m),
        SparseMode::FullSelfExpressive => SparseCodingLayer::full_self_expressive(n, m),
    };
    let result = train_joint(encoder, decoder, &layer, spec, dataset, config)?;

    let (z_train, z_test) = embed_partitions(encoder, spec, dataset)?;
    let train_labels = dataset.labels_of(&dataset.train_idx);
    let mut codes = layer.extract_codes(&train_labels, &z_train, &z_test)?;
    codes.test_labels = Some(dataset.labels_of(&dataset.test_idx));
    Ok(JointOutput { result, codes })
}

/// Final embeddings of both partitions, (d_z, n) and (d_z, m).
pub fn embed_partitions(
    encoder: &EncoderState,
    spec: &NetworkSpec,
    dataset: &LabeledDataset,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let xt = g.input(dataset.batch(&dataset.train_idx));
    let zt = encode(&mut g, spec, encoder, xt)?;
    let z_train = g.value(zt).clone();
    let mut g = Graph::new();
    let xs = g.input(dataset.batch(&dataset.test_idx));
    let zs = encode(&mut g, spec, encoder, xs)?;
    let z_test = g.value(zs).clone();
    Ok((z_train, z_test))
}

/// Classical SRC on raw pixels for the dataset's partition.
pub fn src_baseline(dataset: &LabeledDataset, lambda0: f64) -> Result<Vec<usize>> {
    let train = dataset.vectorize(&dataset.train_idx);
    let test = dataset.vectorize(&dataset.test_idx);
    let labels = dataset.labels_of(&dataset.train_idx);
    crate::classic::src_pipeline(&train, &test, &labels, lambda0)
}

/// End-to-end DSRC on the dataset's partition: pretrain, joint train,
/// classify. Returns predictions and the trained codes.
pub fn dsrc_full(
    dataset: &LabeledDataset,
    spec: &NetworkSpec,
    config: &TrainConfig,
) -> Result<(Vec<usize>, SparseCodes, bool)> {
    let pre = pretrain_stage(dataset, spec, config)?;
    let joint = joint_stage(
        &pre.encoder,
        &pre.decoder,
        dataset,
        spec,
        config,
        SparseMode::Structured,
    )?;
    let train_labels = dataset.labels_of(&dataset.train_idx);
    let (preds, _) = crate::eval::dsrc_classify(&joint.codes.z_train, &train_labels, &joint.codes)?;
    Ok((preds, joint.codes, joint.result.converged))
}
