/// SGD with momentum and gradient-norm clipping, stepping uphill.
#[derive(Debug, Clone, PartialEq)]
pub struct Ascent {
    pub lr: f64,
    pub momentum: f64,
    /// Gradients with a larger Euclidean norm are rescaled to this norm.
    pub clip: f64,
    velocity: Vec<f64>,
}

impl Ascent {
    pub fn new(lr: f64, momentum: f64, clip: f64, n: usize) -> Self {
        Self {
            lr,
            momentum,
            clip,
            velocity: vec![0.0; n],
        }
    }

    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> f64 {
        assert_eq!(theta.len(), grad.len());
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let k = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        for ((t, v), g) in theta.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + k * g;
            *t += self.lr * *v;
        }
        norm
    }
}
