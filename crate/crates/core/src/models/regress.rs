use super::{fit, LossKind, ModelCheckpoint, ModelKind, ModelSpec, Objective, TrainConfig};
use crate::datagen::Dataset;
use crate::diffcore::{Graph, ParamVars, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{derive, Rng};
use crate::Field;

/// Pointwise loss between model outputs and targets, in normalized space.
pub struct RegressionObjective<'a> {
    pub spec: &'a ModelSpec,
    pub inputs: Tensor<f64>,
    pub targets: Tensor<f64>,
    pub cond: Option<Vec<f64>>,
    pub loss: LossKind,
}

impl Objective for RegressionObjective<'_> {
    fn len(&self) -> usize {
        self.inputs.rows()
    }

    fn loss<'p, T: Real>(&self, g: &mut Graph<'p, T>, p: &ParamVars, batch: &[usize], _rng: &mut Rng) -> Result<Var> {
        let x = g.constant(self.inputs.select_rows(batch).cast());
        let y = g.constant(self.targets.select_rows(batch).cast());
        let cond: Option<Vec<f64>> = self.cond.as_ref().map(|c| batch.iter().map(|&i| c[i]).collect());
        let pred = self.spec.forward(g, p, x, cond.as_deref())?;
        let d = g.sub(pred, y)?;
        let e = match self.loss {
            LossKind::L1 => g.abs(d)?,
            LossKind::L2 => g.square(d)?,
        };
        g.mean(e)
    }
}

/// Trains `Ψ: x ↦ y` on `dataset` (normalized with the dataset's statistics).
pub fn train_regressor(spec: &ModelSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<ModelCheckpoint> {
    spec.validate()?;
    if spec.input_shape != dataset.input_shape() || spec.output_shape != dataset.output_shape() {
        return Err(Error::shape(
            "train_regressor",
            format!(
                "spec {:?} → {:?}, dataset {:?} → {:?}",
                spec.input_shape,
                spec.output_shape,
                dataset.input_shape(),
                dataset.output_shape()
            ),
        ));
    }
    let (inputs, targets) = dataset.normalized_pairs(&dataset.normalization)?;
    let obj = RegressionObjective {
        spec,
        inputs,
        targets,
        cond: None,
        loss: cfg.loss,
    };
    let init = spec.init(derive(cfg.seed, "regressor-init"))?;
    let out = fit(&init, &obj, cfg)?;
    Ok(ModelCheckpoint {
        kind: ModelKind::Regressor,
        spec: spec.clone(),
        train: cfg.clone(),
        normalization: dataset.normalization.clone(),
        input_channels: dataset.input_channels,
        params: out.params,
        ema: out.ema,
        loss_curve: out.loss_curve,
        extra: serde_json::Value::Null,
    })
}

/// Runs the regressor on raw inputs `xs [N, input_shape...]`, returning raw outputs.
pub fn predict_batch(ck: &ModelCheckpoint, xs: &Tensor<f64>, cond: Option<&[f64]>) -> Result<Tensor<f64>> {
    if ck.kind != ModelKind::Regressor {
        return Err(Error::invalid(format!("predict needs a regressor, got {:?}", ck.kind)));
    }
    let xn = ck.input_normalization().normalize_batch(xs)?;
    let y = ck.spec.apply(ck.weights(), &xn, cond)?;
    if !y.is_finite() {
        return Err(Error::NumericalOverflow { op: "predict" });
    }
    ck.output_normalization().denormalize_batch(&y)
}

/// Single-sample form of [`predict_batch`]: `x` has the spec's input shape.
pub fn predict(ck: &ModelCheckpoint, x: &Field, cond: Option<f64>) -> Result<Field> {
    if x.shape() != ck.spec.input_shape.as_slice() {
        return Err(Error::shape("predict", format!("input {:?}, spec {:?}", x.shape(), ck.spec.input_shape)));
    }
    let xs = Tensor::stack(std::slice::from_ref(x))?;
    let c = cond.map(|c| [c]);
    let y = predict_batch(ck, &xs, c.as_ref().map(|c| &c[..]))?;
    Ok(y.unstack().remove(0))
}
