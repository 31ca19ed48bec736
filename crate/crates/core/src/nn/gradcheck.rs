use super::compute;
use super::model::Model;
use super::NnError;

/// Central-difference step.
pub const STEP: f64 = 1e-3;

/// Smallest step tried when the default one straddles a ReLU or pooling
/// kink; parameters still straddling at this step are skipped.
pub const MIN_STEP: f64 = 1e-7;

type Pattern = (Vec<Vec<bool>>, Vec<Vec<u32>>);

/// Parameter budget; the check costs two forward passes per parameter.
pub const MAX_PARAMS: usize = 10_000;

/// Largest relative disagreement between backprop and central finite
/// differences of the single-sample cross-entropy, over every parameter:
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`, with `fd` the
/// Richardson extrapolation of central differences at [`STEP`] and half of it,
/// the step shrunk where the step would cross a kink of the piecewise-linear layers.
///
/// Runs the network kernels in f64 so the comparison measures the gradient
/// code rather than float32 rounding.
pub fn gradient_check(model: &Model, input: &[f32], label: usize) -> Result<f64, NnError> {
    if model.param_count() >= MAX_PARAMS {
        return Err(NnError::Config(format!(
            "gradient check limited to fewer than {MAX_PARAMS} parameters, model has {}",
            model.param_count()
        )));
    }
    if input.len() != model.input_len() {
        return Err(NnError::Shape(format!(
            "expected input of length {}, got {}",
            model.input_len(),
            input.len()
        )));
    }
    if label >= model.classes() {
        return Err(NnError::Label {
            index: 0,
            label,
            classes: model.classes(),
        });
    }

    let arch = model.arch();
    let classes = model.classes();
    let labels = [label];
    let x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    let mut params: Vec<Vec<f64>> = model
        .weights()
        .iter()
        .map(|w| w.values().iter().map(|&v| v as f64).collect())
        .collect();

    // loss plus the piecewise-linear branch taken: ReLU on/off and pooling argmax
    let eval = |params: &[Vec<f64>]| -> Result<(f64, Pattern), NnError> {
        let views: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
        let trace = compute::forward(arch, &views, x.clone(), 1)?;
        let hidden = &trace.acts[1..trace.acts.len() - 1];
        let pattern = (
            hidden
                .iter()
                .map(|a| a.iter().map(|&v| v > 0.0).collect())
                .collect(),
            trace.pool_argmax.clone(),
        );
        Ok((compute::cross_entropy(&trace, &labels, classes), pattern))
    };
    let reference = eval(&params)?.1;

    let analytic = {
        let views: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
        let trace = compute::forward(arch, &views, x.clone(), 1)?;
        compute::backward(arch, &views, &trace, &labels)
    };

    let mut worst = 0.0f64;
    for t in 0..params.len() {
        for j in 0..params[t].len() {
            // Richardson-extrapolated central differences at h and h/2; a step
            // that crosses a kink measures the wrong branch, so shrink it
            let original = params[t][j];
            let mut central = |h: f64| -> Result<Option<f64>, NnError> {
                params[t][j] = original + h;
                let (plus, p_plus) = eval(&params)?;
                params[t][j] = original - h;
                let (minus, p_minus) = eval(&params)?;
                params[t][j] = original;
                Ok((p_plus == reference && p_minus == reference)
                    .then(|| (plus - minus) / (2.0 * h)))
            };
            let mut fd = None;
            let mut h = STEP;
            while h >= MIN_STEP {
                if let (Some(coarse), Some(fine)) = (central(h)?, central(h / 2.0)?) {
                    fd = Some((4.0 * fine - coarse) / 3.0);
                    break;
                }
                h /= 10.0;
            }
            let Some(fd) = fd else { continue };
            let a = analytic[t][j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
