use rand::seq::SliceRandom;

use crate::datagen::Normalization;
use crate::diffcore::{Graph, ParamVars, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{fit, Arch, ModelCheckpoint, ModelKind, ModelSpec, Objective, TrainConfig};
use crate::rng::{derive, labeled_stream, Rng};

/// Supervised ID/OOD classifier over concatenated `(x, y_pred)` channels.
#[derive(Clone, Debug)]
pub struct OodcModel {
    pub checkpoint: ModelCheckpoint,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Shuffled train/validation split of `m` samples; the validation count is
/// `floor(0.2·m)`.
pub fn oodc_split(m: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut labeled_stream(seed, "oodc-split", 0));
    let n_val = m / 5;
    let val = idx.split_off(m - n_val);
    (idx, val)
}

struct ClassifierObjective<'a> {
    spec: &'a ModelSpec,
    inputs: Tensor<f64>,
    labels: Vec<bool>,
}

impl Objective for ClassifierObjective<'_> {
    fn len(&self) -> usize {
        self.inputs.rows()
    }

    fn loss<'p, T: Real>(&self, g: &mut Graph<'p, T>, p: &ParamVars, batch: &[usize], _rng: &mut Rng) -> Result<Var> {
        let x = g.constant(self.inputs.select_rows(batch).cast());
        let logits = self.spec.forward(g, p, x, None)?;
        let lp = g.log_softmax(logits)?;
        let mut onehot = Tensor::zeros(&[batch.len(), 2]);
        for (r, &i) in batch.iter().enumerate() {
            onehot.data_mut()[2 * r + usize::from(self.labels[i])] = T::lit(-1.0 / batch.len() as f64);
        }
        let picked = g.mul_const(lp, onehot)?;
        g.sum(picked)
    }
}

impl OodcModel {
    /// Probability of the OOD class for each row of `inputs` (raw joint channels).
    pub fn predict_proba(&self, inputs: &Tensor<f64>) -> Result<Vec<f64>> {
        predict_proba(&self.checkpoint, inputs)
    }
}

pub(crate) fn predict_proba(ck: &ModelCheckpoint, inputs: &Tensor<f64>) -> Result<Vec<f64>> {
    if ck.kind != ModelKind::Classifier {
        return Err(Error::invalid(format!("expected a classifier, got {:?}", ck.kind)));
    }
    let xn = ck.normalization.normalize_batch(inputs)?;
    let logits = ck.spec.apply(ck.weights(), &xn, None)?;
    if !logits.is_finite() {
        return Err(Error::NumericalOverflow { op: "oodc" });
    }
    Ok((0..logits.rows())
        .map(|r| {
            let l = logits.row(r);
            1.0 / (1.0 + (l[0] - l[1]).exp())
        })
        .collect())
}

fn accuracy(p: &[f64], labels: &[bool]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let hits = p.iter().zip(labels).filter(|(&q, &l)| (q >= 0.5) == l).count();
    hits as f64 / p.len() as f64
}

/// Trains the OODC baseline on `xs [M, ...]` and `y_preds [M, ...]`
/// (concatenated along channels); label `true` = OOD. `spec` must be an MLP
/// over the joint shape with output `[2]`.
pub fn oodc_train(
    xs: &Tensor<f64>,
    y_preds: &Tensor<f64>,
    labels: &[bool],
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<OodcModel> {
    let m = xs.rows();
    if y_preds.rows() != m || labels.len() != m {
        return Err(Error::shape(
            "oodc_train",
            format!("{} inputs, {} predictions, {} labels", m, y_preds.rows(), labels.len()),
        ));
    }
    let joint = Tensor::stack(
        &xs.unstack()
            .iter()
            .zip(y_preds.unstack())
            .map(|(x, y)| Tensor::concat_channels(x, &y))
            .collect::<Result<Vec<_>>>()?,
    )?;
    if spec.arch != Arch::Mlp || spec.output_shape != [2] || spec.input_shape != joint.shape()[1..] {
        return Err(Error::invalid(format!(
            "OODC needs an MLP {:?} → [2], got {:?} {:?} → {:?}",
            &joint.shape()[1..],
            spec.arch,
            spec.input_shape,
            spec.output_shape
        )));
    }
    let (train_idx, val_idx) = oodc_split(m, cfg.seed);
    let train_labels: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
    if train_labels.iter().all(|&l| l) || train_labels.iter().all(|&l| !l) {
        return Err(Error::invalid("OODC training split holds a single class"));
    }
    let train = joint.select_rows(&train_idx);
    let norm = Normalization::fit(&train);
    let obj = ClassifierObjective {
        spec,
        inputs: norm.normalize_batch(&train)?,
        labels: train_labels.clone(),
    };
    let init = spec.init(derive(cfg.seed, "oodc-init"))?;
    let out = fit(&init, &obj, cfg)?;
    let checkpoint = ModelCheckpoint {
        kind: ModelKind::Classifier,
        spec: spec.clone(),
        train: cfg.clone(),
        input_channels: norm.channels(),
        normalization: norm,
        params: out.params,
        ema: out.ema,
        loss_curve: out.loss_curve,
        extra: serde_json::Value::Null,
    };
    let train_accuracy = accuracy(&predict_proba(&checkpoint, &train)?, &train_labels);
    let val_labels: Vec<bool> = val_idx.iter().map(|&i| labels[i]).collect();
    let val_accuracy = if val_idx.is_empty() {
        0.0
    } else {
        accuracy(&predict_proba(&checkpoint, &joint.select_rows(&val_idx))?, &val_labels)
    };
    Ok(OodcModel {
        checkpoint,
        train_idx,
        val_idx,
        train_accuracy,
        val_accuracy,
    })
}
