use crate::error::Result;
use crate::models::{argmax, Image};
use crate::numerics::{backward, forward, softmax, NetModel, Tensor};

/// Gradient of the cross-entropy loss at `label` with respect to the input
/// pixels. The model's final layer exposes logits.
fn input_gradient_ce(model: &NetModel, x: &Image, label: usize) -> Result<Vec<f64>> {
    let trace = forward(model, &x.as_tensor())?;
    let probs = softmax(trace.output());
    let mut grad = probs.data().to_vec();
    grad[label] -= 1.0;
    let grad_out = Tensor::new(grad, vec![1, model.output_dim()])?;
    let (_, grad_in) = backward(model, &trace, &grad_out);
    Ok(grad_in.data().to_vec())
}

/// Single-step l-inf attack: x + eps * sign(grad CE), clipped to [0,1].
pub fn fgsm(model: &NetModel, x: &Image, label: usize, eps: f64) -> Result<Image> {
    let grad = input_gradient_ce(model, x, label)?;
    let pixels = x
        .pixels()
        .iter()
        .zip(&grad)
        .map(|(p, g)| p + eps * sign(*g))
        .collect();
    Image::clipped(pixels, x.shape())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Multi-step targeted margin ascent inside the eps l-inf ball: maximizes
/// logit(target) - max other logit, stopping once the margin reaches kappa.
/// kappa = 0 stops at the first point classified as the target.
pub fn pgd_margin(
    model: &NetModel,
    x: &Image,
    target: usize,
    eps: f64,
    kappa: f64,
    steps: usize,
) -> Result<Image> {
    if eps == 0.0 || steps == 0 {
        return Ok(x.clone());
    }
    let step = 2.5 * eps / steps as f64;
    let mut current = x.clone();
    for _ in 0..steps {
        let trace = forward(model, &current.as_tensor())?;
        let logits = trace.output().data();
        let runner_up = runner_up_class(logits, target);
        let margin = logits[target] - logits[runner_up];
        if margin > kappa {
            break;
        }
        // d(margin)/d(logits) = e_target - e_runner_up
        let mut grad = vec![0.0; logits.len()];
        grad[target] = 1.0;
        grad[runner_up] = -1.0;
        let grad_out = Tensor::new(grad, vec![1, model.output_dim()])?;
        let (_, grad_in) = backward(model, &trace, &grad_out);
        let pixels: Vec<f64> = current
            .pixels()
            .iter()
            .zip(x.pixels())
            .zip(grad_in.data())
            .map(|((c, orig), g)| {
                let moved = c + step * sign(*g);
                moved.clamp(orig - eps, orig + eps)
            })
            .collect();
        current = Image::clipped(pixels, x.shape())?;
    }
    Ok(current)
}

fn runner_up_class(logits: &[f64], target: usize) -> usize {
    let mut best = usize::MAX;
    for (i, v) in logits.iter().enumerate() {
        if i == target {
            continue;
        }
        if best == usize::MAX || *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Second-most-likely class under the model at x (untargeted attack target).
pub fn next_most_likely(model: &NetModel, x: &Image) -> Result<usize> {
    let trace = forward(model, &x.as_tensor())?;
    let logits = trace.output().data();
    Ok(runner_up_class(logits, argmax(logits)))
}
