//! Central finite-difference checks for network parameter gradients.

use kqkit::kd::net::{ForwardCache, Gradients};
use kqkit::kd::{forward_capture, Network};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-4;
pub const REL: f64 = 1e-3;

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL * analytic.abs().max(numeric.abs()) + 1e-9
}

pub fn gaussian(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// 3-layer net with random biases and a batch whose pre-activations all
/// stay clear of the ReLU kink, so central differences are well defined.
pub fn net_and_batch(seed: u64) -> (Network, DMatrix<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut net = Network::mlp(4, &[6, 5], 3, &mut rng);
        for l in net.layers_mut() {
            let n = l.out_dim();
            l.bias = Some(DVector::from_fn(n, |_, _| {
                0.3 * rng.sample::<f64, _>(StandardNormal)
            }));
        }
        let x = gaussian(&mut rng, 8, 4);
        let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
        let cache = forward_capture(&net, &x).unwrap();
        let margin = cache.pre[..2]
            .iter()
            .flat_map(|p| p.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if margin > 0.02 {
            return (net, x, y);
        }
    }
}

/// Compares every parameter gradient against central differences of `loss`.
/// Returns the number of parameters checked.
pub fn check_network(
    net: &Network,
    grads: &Gradients,
    loss: impl Fn(&Network) -> f64,
    what: &str,
) -> usize {
    let mut checked = 0;
    for li in 0..net.depth() {
        let (rows, cols) = net.layers()[li].weights.shape();
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = net.clone();
                plus.layers_mut()[li].weights[(r, c)] += STEP;
                let mut minus = net.clone();
                minus.layers_mut()[li].weights[(r, c)] -= STEP;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
                let an = grads.layers[li].weights[(r, c)];
                assert!(
                    close(an, fd),
                    "{what}: layer {} weight ({r},{c}): {an} vs {fd}",
                    li + 1
                );
                checked += 1;
            }
        }
        for k in 0..cols {
            let mut plus = net.clone();
            plus.layers_mut()[li].bias.as_mut().unwrap()[k] += STEP;
            let mut minus = net.clone();
            minus.layers_mut()[li].bias.as_mut().unwrap()[k] -= STEP;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            let an = grads.layers[li].bias.as_ref().unwrap()[k];
            assert!(
                close(an, fd),
                "{what}: layer {} bias {k}: {an} vs {fd}",
                li + 1
            );
            checked += 1;
        }
    }
    checked
}

pub fn fwd(net: &Network, x: &DMatrix<f64>) -> ForwardCache {
    forward_capture(net, x).unwrap()
}
