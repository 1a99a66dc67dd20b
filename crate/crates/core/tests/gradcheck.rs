use hazefork::net::{DehazeNet, LossWeights, NetworkSpec, Objective};
use hazefork::nn::gradcheck::{check_layer, check_loss, check_network, GradCheck, DEFAULT_STEP};
use hazefork::nn::{Activation, ActivationKind, BatchNorm2d, Conv2d, ConvTranspose2d, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn input(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
    Tensor4::uniform(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn assert_passes(what: &str, r: GradCheck) {
    assert!(r.passes(TOL), "{what}: {} checks, max rel err {:.3e} at {}", r.checked, r.max_relative_error, r.worst);
}

#[test]
fn conv_gradients() {
    for (seed, &(cin, cout, k, s, p, side)) in [(2, 3, 3, 1, 1, 6), (3, 2, 3, 2, 1, 7), (1, 4, 2, 2, 0, 8), (2, 2, 5, 1, 2, 5)].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let mut layer = Conv2d::<f64>::new(cin, cout, k, s, p, &mut rng);
        let x = input([2, cin, side, side], 100 + seed as u64);
        assert_passes("conv", check_layer(&mut layer, &x, DEFAULT_STEP, seed as u64).unwrap());
    }
}

#[test]
fn transposed_conv_gradients() {
    for (seed, &(cin, cout, k, s, p, side)) in [(2, 3, 4, 2, 1, 4), (3, 2, 3, 1, 1, 5), (2, 2, 3, 2, 0, 3)].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let mut layer = ConvTranspose2d::<f64>::new(cin, cout, k, s, p, &mut rng);
        let x = input([2, cin, side, side], 200 + seed as u64);
        assert_passes("transposed conv", check_layer(&mut layer, &x, DEFAULT_STEP, seed as u64).unwrap());
    }
}

#[test]
fn batchnorm_gradients() {
    let mut layer = BatchNorm2d::<f64>::new(3);
    // non-trivial affine parameters
    for (i, (_, p)) in hazefork::nn::Layer::params_mut(&mut layer).into_iter().enumerate() {
        for (j, v) in p.value.iter_mut().enumerate() {
            *v = 0.5 + 0.3 * (i + j) as f64;
        }
    }
    let x = input([3, 3, 4, 5], 300);
    assert_passes("batch norm", check_layer(&mut layer, &x, DEFAULT_STEP, 3).unwrap());
}

#[test]
fn activation_gradients() {
    for kind in [ActivationKind::Tanh, ActivationKind::Sigmoid] {
        let mut layer = Activation::<f64>::new(kind);
        let x = input([2, 2, 8, 8], 400).map(|v| 3.0 * v);
        assert_passes(&format!("{kind:?}"), check_layer(&mut layer, &x, DEFAULT_STEP, 4).unwrap());
    }
}

#[test]
fn loss_gradients() {
    let mut objectives = vec![Objective::MapMse];
    for (l1, l2, l3) in [(true, true, true), (false, false, true), (true, true, false), (false, true, true), (true, false, true)] {
        objectives.push(Objective::Reconstruction(LossWeights { gamma: 15.0, ..LossWeights::with_terms(l1, l2, l3) }));
    }
    for (seed, obj) in objectives.iter().enumerate() {
        assert_passes(&obj.label(), check_loss(obj, 8, 1e-6, seed as u64).unwrap());
    }
}

#[test]
fn whole_network_gradients() {
    let mut spec = NetworkSpec::slim(8);
    spec.patch_size = 8;
    let mut net: DehazeNet<f64> = DehazeNet::<f32>::new(&spec, 5).unwrap().cast();
    let x = input([2, 3, 8, 8], 500).map(|v| 0.5 + 0.5 * v);
    assert_passes("network", check_network(&mut net, &x, 1e-4, Some(12), 6).unwrap());
}
