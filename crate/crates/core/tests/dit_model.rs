use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nextdit::dit::{
    forward_tokens, forward_velocity, load_checkpoint, patchify, patchify_batch,
    recognition_forward, save_checkpoint, unpatchify, unpatchify_batch, DitConfig, Mode,
    ModelParams, NormStyle, VelocityOptions,
};
use nextdit::partitioner::pad_batch;
use nextdit::rope::Coords;
use nextdit::{Error, Tensor};

fn normal(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

fn random_params(cfg: &DitConfig, seed: u64) -> ModelParams<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(cfg, &mut rng);
    p.randomize(&mut rng, 0.3);
    p
}

#[test]
fn patchify_orders_patches_row_major() {
    // 4x4 single-channel image holding its own pixel index
    let img = Tensor::from_fn(&[4, 4, 1], |i| i as f64);
    let (tokens, coords) = patchify(&img, 2).unwrap();
    assert_eq!(tokens.shape(), &[4, 4]);
    assert_eq!(tokens.row(0), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(tokens.row(1), &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(tokens.row(3), &[10.0, 11.0, 14.0, 15.0]);
    assert_eq!(coords, Coords::grid(2, 2));
}

#[test]
fn patchify_round_trips() {
    for (h, w, c, p) in [(4, 6, 3, 2), (8, 8, 1, 4), (3, 5, 2, 1), (6, 9, 1, 3)] {
        let img = normal(7, &[h, w, c]);
        let (tokens, _) = patchify(&img, p).unwrap();
        assert_eq!(tokens.shape(), &[(h / p) * (w / p), p * p * c]);
        assert_eq!(unpatchify(&tokens, h, w, c, p).unwrap(), img);

        let batch = normal(8, &[3, h, w, c]);
        let (tokens, _) = patchify_batch(&batch, p).unwrap();
        assert_eq!(unpatchify_batch(&tokens, 3, h, w, c, p).unwrap(), batch);
    }
}

#[test]
fn patchify_rejects_indivisible_sizes() {
    let img = normal(1, &[5, 4, 1]);
    assert!(matches!(patchify(&img, 2), Err(Error::Dimension(_))));
}

#[test]
fn zero_initialized_network_predicts_zero_velocity() {
    for norm in [NormStyle::Sandwich, NormStyle::PreNorm] {
        let cfg = DitConfig { norm, patch: 2, in_channels: 3, ..DitConfig::default() };
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let x = normal(4, &[2, 4, 6, 3]);
        let v = forward_velocity(&params, &cfg, &x, 0.4, None, &VelocityOptions::default()).unwrap();
        assert_eq!(v.shape(), x.shape());
        assert!(v.data().iter().all(|&e| e == 0.0));
    }
}

#[test]
fn single_image_matches_batch_of_one() {
    let cfg = DitConfig::default();
    let params = random_params(&cfg, 5);
    let x = normal(6, &[4, 4, 1]);
    let opts = VelocityOptions::default();
    let single = forward_velocity(&params, &cfg, &x, 0.7, None, &opts).unwrap();
    let batched = forward_velocity(&params, &cfg, &x.clone().reshape(&[1, 4, 4, 1]).unwrap(), 0.7, None, &opts).unwrap();
    assert_eq!(single.shape(), &[4, 4, 1]);
    assert_eq!(single.data(), batched.data());
}

#[test]
fn batch_samples_are_independent() {
    let cfg = DitConfig::default();
    let params = random_params(&cfg, 9);
    let x = normal(10, &[3, 4, 4, 1]);
    let opts = VelocityOptions::default();
    let all = forward_velocity(&params, &cfg, &x, 0.2, None, &opts).unwrap();
    for b in 0..3 {
        let one = Tensor::new(vec![4, 4, 1], x.data()[b * 16..(b + 1) * 16].to_vec()).unwrap();
        let v = forward_velocity(&params, &cfg, &one, 0.2, None, &opts).unwrap();
        let diff = v.data().iter().zip(&all.data()[b * 16..(b + 1) * 16]).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "sample {b}: {diff}");
    }
}

#[test]
fn token_permutation_is_equivariant() {
    let cfg = DitConfig::default();
    let params = random_params(&cfg, 11);
    let tokens = normal(12, &[12, cfg.patch_dim()]);
    let coords = Coords::grid(3, 4);
    let out = forward_tokens(&params, &cfg, &tokens, &coords, 0.5, None).unwrap();

    let perm = [5, 0, 11, 3, 7, 1, 9, 2, 10, 4, 8, 6];
    let pt = Tensor::from_fn(tokens.shape(), |i| tokens.row(perm[i / cfg.patch_dim()])[i % cfg.patch_dim()]);
    let pc = Coords(perm.iter().map(|&i| coords.0[i]).collect());
    let pout = forward_tokens(&params, &cfg, &pt, &pc, 0.5, None).unwrap();
    for (r, &src) in perm.iter().enumerate() {
        for (a, b) in pout.row(r).iter().zip(out.row(src)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn labels_change_the_prediction() {
    let cfg = DitConfig { num_classes: 4, ..DitConfig::default() };
    let params = random_params(&cfg, 13);
    let x = normal(14, &[1, 4, 4, 1]);
    let opts = VelocityOptions::default();
    let a = forward_velocity(&params, &cfg, &x, 0.5, Some(0), &opts).unwrap();
    let b = forward_velocity(&params, &cfg, &x, 0.5, Some(2), &opts).unwrap();
    let null = forward_velocity(&params, &cfg, &x, 0.5, None, &opts).unwrap();
    let null_explicit = forward_velocity(&params, &cfg, &x, 0.5, Some(4), &opts).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
    assert_eq!(null.data(), null_explicit.data());
}

#[test]
fn out_of_range_time_is_a_domain_error() {
    let cfg = DitConfig::default();
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let x = normal(1, &[1, 2, 2, 1]);
    for t in [-0.1, 1.5, f64::NAN] {
        let r = forward_velocity(&params, &cfg, &x, t, None, &VelocityOptions::default());
        assert!(matches!(r, Err(Error::Domain(_))), "t = {t}");
    }
}

#[test]
fn recognition_mean_pool_ignores_token_order() {
    let cfg = DitConfig { mode: Mode::Recognition, num_classes: 5, ..DitConfig::default() };
    let params = random_params(&cfg, 15);
    // without positional differences, the pooled head is order-invariant
    let seq = normal(16, &[6, cfg.patch_dim()]);
    let coords = Coords(vec![[0.0; 3]; 6]);
    let (batch, mask) = pad_batch(std::slice::from_ref(&seq)).unwrap();
    let base = recognition_forward(&params, &cfg, &batch, &mask, std::slice::from_ref(&coords)).unwrap();
    let reversed = Tensor::from_fn(seq.shape(), |i| seq.row(5 - i / cfg.patch_dim())[i % cfg.patch_dim()]);
    let (batch, mask) = pad_batch(&[reversed]).unwrap();
    let out = recognition_forward(&params, &cfg, &batch, &mask, &[coords]).unwrap();
    assert_eq!(out.shape(), &[1, 5]);
    assert!(out.max_abs_diff(&base) < 1e-12);
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DitConfig { num_classes: 3, depth: 3, ..DitConfig::default() };
    let params = random_params(&cfg, 17);
    save_checkpoint(dir.path(), &cfg, &params).unwrap();
    let (cfg2, params2) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(params2, params);
}

#[test]
fn only_the_output_layer_learns_at_the_first_step() {
    // the zero output projection blocks every gradient upstream of it
    let cfg = nextdit::flowlab::ToyFlow::config(16, 2);
    let flow = nextdit::flowlab::ToyFlow::new(cfg, 1).unwrap();
    let x1 = normal(18, &[8, 2]);
    let noise = normal(19, &[8, 2]);
    let t = vec![0.3; 8];
    let (_, g) = nextdit::flowlab::grad(&flow, &x1, &t, &noise).unwrap();
    for (name, grad) in g.named() {
        let nonzero = grad.data().iter().any(|&v| v != 0.0);
        let expected = name == "final_w" || name == "final_b";
        assert_eq!(nonzero, expected, "{name}");
    }
}
