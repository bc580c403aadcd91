use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use samovar_core::autodiff::{ParamSet, Tape, Tensor, Var};
use samovar_core::blobs::*;
use samovar_core::fewshot::*;
use samovar_core::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn micro_config(classifier: ClassifierMode) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        hidden: vec![5],
        feature_dim: 4,
        inference_width: 3,
        classifier,
        alpha: 2.0,
        beta: 0.7,
        ..Default::default()
    }
}

/// Every parameter redrawn from N(0, scale²).
fn randomize(params: &mut ParamSet, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        for v in params.get_mut(&name).unwrap().data_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v = scale * z;
        }
    }
}

fn model(config: ModelConfig, seed: u64) -> FewShotModel {
    FewShotModel::new(config, &mut rng(seed)).unwrap()
}

fn random_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Episode built directly from inputs; labels are `i % way`.
fn episode_from(support_x: Tensor, query_x: Tensor, way: usize) -> Episode {
    let support_y: Vec<usize> = (0..support_x.rows()).map(|i| i % way).collect();
    let query_y: Vec<usize> = (0..query_x.rows()).map(|i| i % way).collect();
    Episode {
        shot: support_x.rows() / way,
        support_index: (0..support_x.rows()).map(|i| (i % way, i)).collect(),
        query_index: (0..query_x.rows()).map(|i| (i % way, 1000 + i)).collect(),
        support_x,
        support_y,
        query_x,
        query_y,
        way,
        classes: (0..way).collect(),
    }
}

fn micro_episode(seed: u64) -> Episode {
    episode_from(random_rows(4, 3, seed), random_rows(4, 3, seed + 1), 2)
}

fn blobs() -> BlobDataset {
    make_dataset(&BlobDatasetConfig::default()).unwrap()
}

fn small_blobs() -> BlobDataset {
    make_dataset(&BlobDatasetConfig {
        num_classes: 12,
        samples_per_class: 30,
        input_dim: 4,
        split_counts: (6, 3, 3),
        ..Default::default()
    })
    .unwrap()
}

// ---------------------------------------------------------------- features

#[test]
fn identity_film_leaves_features_unchanged() {
    let m = model(ModelConfig::default(), 1);
    let x = random_rows(6, 16, 2);
    let plain = extract_features(&m, &x, None).unwrap();
    let film = extract_features(&m, &x, Some(&Film::identity(&m.config.hidden))).unwrap();
    assert_eq!(plain.max_abs_diff(&film), 0.0);
}

#[test]
fn single_identity_layer_passes_inputs_through() {
    let cfg = ModelConfig { input_dim: 4, hidden: vec![], feature_dim: 4, ..Default::default() };
    let mut m = model(cfg, 1);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    *m.params.get_mut("theta.l0.weight").unwrap() = eye;
    *m.params.get_mut("theta.l0.bias").unwrap() = Tensor::zeros(&[4]);
    let x = random_rows(3, 4, 5);
    assert_eq!(extract_features(&m, &x, None).unwrap().max_abs_diff(&x), 0.0);
}

#[test]
fn zero_gamma_replaces_the_layer_by_its_shift() {
    let cfg = ModelConfig { input_dim: 3, hidden: vec![4], feature_dim: 2, ..Default::default() };
    let m = model(cfg, 3);
    let delta = vec![0.3, -1.2, 0.0, 2.0];
    let film = Film { gamma: vec![vec![0.0; 4]], delta: vec![delta.clone()] };
    let feats = extract_features(&m, &random_rows(5, 3, 9), Some(&film)).unwrap();
    // every input maps to ELU(δ) pushed through the last layer
    let elu = |v: f64| if v > 0.0 { v } else { v.exp_m1() };
    let w = m.params.get("theta.l1.weight").unwrap();
    let b = m.params.get("theta.l1.bias").unwrap();
    for i in 0..5 {
        for j in 0..2 {
            let expect: f64 = b.data()[j] + (0..4).map(|k| elu(delta[k]) * w.data()[k * 2 + j]).sum::<f64>();
            assert!((feats.row(i)[j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let m = model(ModelConfig::default(), 1);
    assert!(matches!(extract_features(&m, &random_rows(2, 15, 0), None), Err(Error::Contract(_))));
    let bad = Film { gamma: vec![vec![1.0; 64]], delta: vec![vec![0.0; 64]] };
    assert!(matches!(extract_features(&m, &random_rows(2, 16, 0), Some(&bad)), Err(Error::Contract(_))));
}

// -------------------------------------------------------------- prototypes

#[test]
fn prototype_examples() {
    let f = random_rows(3, 4, 1);
    let (p, grand) = class_prototypes(&f, &[0, 1, 2], 3).unwrap();
    assert_eq!(p.max_abs_diff(&f), 0.0);
    for j in 0..4 {
        let m = (0..3).map(|i| f.row(i)[j]).sum::<f64>() / 3.0;
        assert!((grand[j] - m).abs() < 1e-15);
    }
    let dup = Tensor::matrix(2, 2, vec![1.5, -2.0, 1.5, -2.0]).unwrap();
    let (p, _) = class_prototypes(&dup, &[0, 0], 1).unwrap();
    assert_eq!(p.data(), &[1.5, -2.0]);
}

#[test]
fn empty_class_is_rejected() {
    let f = random_rows(2, 3, 1);
    assert!(matches!(class_prototypes(&f, &[0, 0], 2), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prototypes_ignore_sample_order(seed in 0u64..1000, way in 1usize..4, shot in 1usize..5) {
        let n = way * shot;
        let f = random_rows(n, 3, seed);
        let labels: Vec<usize> = (0..n).map(|i| i % way).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng(seed + 7));
        let shuffled = Tensor::matrix(n, 3, order.iter().flat_map(|&i| f.row(i).to_vec()).collect()).unwrap();
        let shuffled_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let (a, _) = class_prototypes(&f, &labels, way).unwrap();
        let (b, _) = class_prototypes(&shuffled, &shuffled_labels, way).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn episode_predictions_ignore_sample_order(seed in 0u64..1000) {
        let mut m = model(micro_config(ClassifierMode::Cosine), seed);
        randomize(&mut m.params, 0.5, seed);
        let ep = episode_from(random_rows(6, 3, seed), random_rows(4, 3, seed + 1), 2);
        let mut order: Vec<usize> = (0..6).collect();
        order.shuffle(&mut rng(seed + 2));
        let mut perm = ep.clone();
        perm.support_x = Tensor::matrix(6, 3, order.iter().flat_map(|&i| ep.support_x.row(i).to_vec()).collect()).unwrap();
        perm.support_y = order.iter().map(|&i| ep.support_y[i]).collect();
        let a = predict(&m, &ep, PredictMode::Mean, &mut rng(0)).unwrap();
        let b = predict(&m, &perm, PredictMode::Mean, &mut rng(0)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }
}

// --------------------------------------------------------------- inference

#[test]
fn zero_heads_give_standard_normals() {
    let mut m = model(ModelConfig::default(), 4);
    for head in ["phi.mean.weight", "phi.mean.bias", "phi.logvar.weight", "phi.logvar.bias"] {
        let shape = m.params.get(head).unwrap().shape().to_vec();
        *m.params.get_mut(head).unwrap() = Tensor::zeros(&shape);
    }
    let dists = infer_class_distribution(&m, InferenceNet::Prior, &random_rows(5, 32, 1)).unwrap();
    assert_eq!(dists.len(), 5);
    for d in dists {
        assert!(d.mean().iter().all(|&v| v == 0.0));
        assert!(d.variance().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn fresh_models_start_at_unit_variance() {
    let m = model(ModelConfig::default(), 4);
    let ep = sample_episode(&blobs(), &EpisodeSpec::new(5, 5, 15, Split::Train)).unwrap();
    assert_eq!(track_max_variance(&m, &ep).unwrap(), 1.0);
}

#[test]
fn class_distributions_factorize() {
    let mut m = model(ModelConfig::default(), 5);
    randomize(&mut m.params, 0.3, 5);
    let mut protos = random_rows(4, 32, 2);
    let before = infer_class_distribution(&m, InferenceNet::Prior, &protos).unwrap();
    for v in &mut protos.data_mut()[2 * 32..3 * 32] {
        *v += 0.5;
    }
    let after = infer_class_distribution(&m, InferenceNet::Prior, &protos).unwrap();
    for n in 0..4 {
        let same = before[n] == after[n];
        assert_eq!(same, n != 2, "class {n}");
    }
}

#[test]
fn perturbing_one_class_support_moves_only_its_prior() {
    let mut m = model(micro_config(ClassifierMode::Linear), 6);
    randomize(&mut m.params, 0.5, 6);
    let ep = episode_from(random_rows(6, 3, 3), random_rows(3, 3, 4), 3);
    let prior = |ep: &Episode| {
        let f = extract_features(&m, &ep.support_x, None).unwrap();
        let (p, _) = class_prototypes(&f, &ep.support_y, 3).unwrap();
        infer_class_distribution(&m, InferenceNet::Prior, &p).unwrap()
    };
    let base = prior(&ep);
    let mut moved = ep.clone();
    // rows 1 and 4 belong to class 1
    for r in [1, 4] {
        for v in &mut moved.support_x.data_mut()[r * 3..r * 3 + 3] {
            *v -= 0.8;
        }
    }
    let after = prior(&moved);
    assert_eq!(base[0], after[0]);
    assert_ne!(base[1], after[1]);
    assert_eq!(base[2], after[2]);
}

#[test]
fn shared_posterior_equals_prior_on_identical_inputs() {
    let mut m = model(ModelConfig::default(), 7);
    randomize(&mut m.params, 0.3, 7);
    let p = random_rows(3, 32, 1);
    let prior = infer_class_distribution(&m, InferenceNet::Prior, &p).unwrap();
    let post = infer_class_distribution(&m, InferenceNet::Posterior, &p).unwrap();
    assert_eq!(prior, post);
}

#[test]
fn separate_networks_match_the_shared_parameter_count() {
    for classifier in [ClassifierMode::Cosine, ClassifierMode::Linear] {
        let shared = model(ModelConfig { classifier, ..Default::default() }, 0);
        let sep = model(ModelConfig { classifier, shared: false, ..Default::default() }, 0);
        let (a, b) = (shared.inference_param_count() as f64, sep.inference_param_count() as f64);
        assert!((a - b).abs() / a < 0.05, "{a} vs {b}");
        assert!(sep.params.get("psi.trunk.weight").is_some());
        assert!(shared.params.get("psi.trunk.weight").is_none());
    }
}

// --------------------------------------------------------------------- TEN

#[test]
fn fresh_ten_is_the_identity() {
    let m = model(ModelConfig { ten: true, ..Default::default() }, 8);
    let film = ten_condition(&m, &vec![0.4; 32]).unwrap();
    assert_eq!(film, Film::identity(&[64, 64]));
}

#[test]
fn ten_is_a_function_of_the_grand_prototype() {
    let mut m = model(ModelConfig { ten: true, ..Default::default() }, 9);
    randomize(&mut m.params, 0.2, 9);
    let c: Vec<f64> = (0..32).map(|i| (i as f64).sin()).collect();
    assert_eq!(ten_condition(&m, &c).unwrap(), ten_condition(&m, &c).unwrap());
    let film = ten_condition(&m, &c).unwrap();
    assert_ne!(film, Film::identity(&[64, 64]));
    let off = model(ModelConfig::default(), 9);
    assert!(matches!(ten_condition(&off, &c), Err(Error::Contract(_))));
}

#[test]
fn disabled_ten_equals_fresh_ten() {
    let cfg = micro_config(ClassifierMode::Cosine);
    let mut plain = model(cfg.clone(), 10);
    randomize(&mut plain.params, 0.5, 10);
    let mut with_ten = model(ModelConfig { ten: true, ..cfg }, 10);
    let mut ten_params = ParamSet::new();
    for (name, t) in with_ten.params.iter() {
        if name.starts_with("ten.") {
            ten_params.insert(name.clone(), t.clone()).unwrap();
        }
    }
    with_ten.params = plain.params.clone();
    with_ten.params.merge(&ten_params).unwrap();
    let ep = micro_episode(3);
    let noise = draw_noise(&plain, 2, 3, &mut rng(1));
    let loss = |m: &FewShotModel| {
        let mut tape = Tape::new();
        let e = elbo_loss(&mut tape, m, &ep, 0.5, &noise).unwrap();
        tape.value(e.loss).item()
    };
    assert!((loss(&plain) - loss(&with_ten)).abs() < 1e-12);
}

// -------------------------------------------------------------- classifier

#[test]
fn zero_linear_weights_are_uniform() {
    let m = model(ModelConfig { classifier: ClassifierMode::Linear, ..Default::default() }, 0);
    let lp = classify(&m, &Tensor::zeros(&[5, 33]), &random_rows(3, 32, 1)).unwrap();
    assert!(lp.data().iter().all(|&v| (v - (0.2f64).ln()).abs() < 1e-15));
}

#[test]
fn cosine_logits_are_scaled_cosines() {
    let m = model(ModelConfig { feature_dim: 3, ..Default::default() }, 0);
    let w = Tensor::matrix(3, 3, vec![2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.1]).unwrap();
    let f = Tensor::matrix(1, 3, vec![0.7, 0.0, 0.0]).unwrap();
    let lp = classify(&m, &w, &f).unwrap();
    // logits [25, 0, 0]
    let lse = (25f64.exp() + 2.0).ln();
    let expect = [25.0 - lse, -lse, -lse];
    for (a, b) in lp.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cosine_is_scale_invariant() {
    let m = model(ModelConfig::default(), 0);
    let w = random_rows(5, 32, 1);
    let f = random_rows(4, 32, 2);
    let base = classify(&m, &w, &f).unwrap();
    let mut w2 = w.clone();
    for (i, v) in w2.data_mut().iter_mut().enumerate() {
        *v *= 0.01 + (i / 32) as f64 * 7.0;
    }
    let f2 = f.map(|v| v * 123.0);
    assert!(classify(&m, &w2, &f2).unwrap().max_abs_diff(&base) < 1e-10);
}

#[test]
fn cosine_rejects_zero_vectors() {
    let m = model(ModelConfig { feature_dim: 2, ..Default::default() }, 0);
    let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let f = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    assert!(matches!(classify(&m, &w, &f), Err(Error::Degenerate(_))));
    let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let f = Tensor::zeros(&[1, 2]);
    assert!(matches!(classify(&m, &w, &f), Err(Error::Degenerate(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cosine_predictions_ignore_rescaling(seed in 0u64..1000, s in 0.01f64..100.0) {
        let m = model(ModelConfig { feature_dim: 6, ..Default::default() }, 0);
        let w = random_rows(4, 6, seed);
        let f = random_rows(3, 6, seed + 1);
        let a = classify(&m, &w, &f).unwrap();
        let b = classify(&m, &w.map(|v| v * s), &f.map(|v| v / s)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }
}

// ------------------------------------------------------------------ losses

/// Central-difference check of `loss` against reverse-mode gradients for
/// every scalar parameter of `m`; returns the worst relative error.
fn param_grad_check(m: &FewShotModel, loss: impl Fn(&mut Tape, &FewShotModel) -> Var) -> f64 {
    let mut tape = Tape::new();
    let y = loss(&mut tape, m);
    let grads = tape.backward(y, &m.params).unwrap();
    let value = |m: &FewShotModel| {
        let mut tape = Tape::new();
        let y = loss(&mut tape, m);
        tape.value(y).item()
    };
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = m.clone();
    for (name, t) in m.params.iter() {
        for i in 0..t.len() {
            let x0 = t.data()[i];
            probe.params.get_mut(name).unwrap().data_mut()[i] = x0 + eps;
            let up = value(&probe);
            probe.params.get_mut(name).unwrap().data_mut()[i] = x0 - eps;
            let down = value(&probe);
            probe.params.get_mut(name).unwrap().data_mut()[i] = x0;
            let fd = (up - down) / (2.0 * eps);
            let ad = grads.get(name).map_or(0.0, |g| g.data()[i]);
            worst = worst.max((ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs()));
        }
    }
    worst
}

#[test]
fn loss_gradients_match_finite_differences() {
    let variants = [
        micro_config(ClassifierMode::Cosine),
        micro_config(ClassifierMode::Linear),
        ModelConfig { shared: false, ..micro_config(ClassifierMode::Cosine) },
        ModelConfig { ten: true, ..micro_config(ClassifierMode::Linear) },
        ModelConfig { aux_classes: Some(3), ..micro_config(ClassifierMode::Cosine) },
    ];
    for (k, cfg) in variants.into_iter().enumerate() {
        let mut m = model(cfg, k as u64);
        randomize(&mut m.params, 0.5, 100 + k as u64);
        let ep = micro_episode(10 + k as u64);
        let noise = draw_noise(&m, 2, 3, &mut rng(k as u64));
        let err = param_grad_check(&m, |t, m| elbo_loss(t, m, &ep, m.config.beta, &noise).unwrap().loss);
        assert!(err < 1e-4, "elbo variant {k}: {err}");
        let err = param_grad_check(&m, |t, m| mc_loss(t, m, &ep, &noise).unwrap());
        assert!(err < 1e-4, "mc variant {k}: {err}");
        if m.config.aux_classes.is_some() {
            let x = random_rows(5, 3, 1);
            let err = param_grad_check(&m, |t, m| aux_loss(t, m, &x, &[0, 2, 1, 1, 0]).unwrap());
            assert!(err < 1e-4, "aux: {err}");
        }
    }
}

#[test]
fn kl_vanishes_and_elbo_matches_mc_when_queries_repeat_the_support() {
    for classifier in [ClassifierMode::Cosine, ClassifierMode::Linear] {
        for ten in [false, true] {
            let mut m = model(ModelConfig { ten, ..micro_config(classifier) }, 11);
            randomize(&mut m.params, 0.5, 11);
            let x = random_rows(4, 3, 5);
            let ep = episode_from(x.clone(), x, 2);
            let noise = draw_noise(&m, 2, 1, &mut rng(3));
            let mut tape = Tape::new();
            let e = elbo_loss(&mut tape, &m, &ep, 0.9, &noise).unwrap();
            assert!(e.kl.abs() < 1e-12);
            // the ELBO sums over queries, the Monte-Carlo loss averages
            let elbo = tape.value(e.loss).item();
            let mc = mc_loss(&mut tape, &m, &ep, &noise).unwrap();
            let mc = tape.value(mc).item() * 4.0;
            assert!((elbo - mc).abs() < 1e-10, "{classifier} ten={ten}: {elbo} vs {mc}");
        }
    }
}

/// Log-variance heads pinned to the clamp floor.
fn floor_variance(m: &mut FewShotModel) {
    for net in ["phi", "psi"] {
        if let Some(w) = m.params.get_mut(&format!("{net}.logvar.weight")) {
            w.data_mut().fill(0.0);
            m.params.get_mut(&format!("{net}.logvar.bias")).unwrap().data_mut().fill(-50.0);
        }
    }
}

#[test]
fn deterministic_elbo_with_zero_beta_is_mean_classifier_cross_entropy() {
    for classifier in [ClassifierMode::Cosine, ClassifierMode::Linear] {
        let mut m = model(ModelConfig { shared: false, ..micro_config(classifier) }, 12);
        randomize(&mut m.params, 0.5, 12);
        floor_variance(&mut m);
        let ep = micro_episode(20);
        let noise = Tensor::zeros(&[2, m.config.weight_dim()]);
        let mut tape = Tape::new();
        let e = elbo_loss(&mut tape, &m, &ep, 0.0, &noise).unwrap();
        let loss = tape.value(e.loss).item();

        // oracle: posterior mean from the union prototypes, then cross-entropy
        let fs = extract_features(&m, &ep.support_x, None).unwrap();
        let fq = extract_features(&m, &ep.query_x, None).unwrap();
        let both = Tensor::matrix(8, 4, fs.data().iter().chain(fq.data()).copied().collect()).unwrap();
        let labels: Vec<usize> = ep.support_y.iter().chain(&ep.query_y).copied().collect();
        let (protos, _) = class_prototypes(&both, &labels, 2).unwrap();
        let post = infer_class_distribution(&m, InferenceNet::Posterior, &protos).unwrap();
        let w = Tensor::matrix(2, m.config.weight_dim(), post.iter().flat_map(|d| d.mean().to_vec()).collect()).unwrap();
        let lp = classify(&m, &w, &fq).unwrap();
        let ce: f64 = ep.query_y.iter().enumerate().map(|(i, &y)| -lp.row(i)[y]).sum();
        assert!((loss - ce).abs() < 1e-10, "{classifier}: {loss} vs {ce}");
    }
}

#[test]
fn mc_with_zero_noise_scores_the_prior_mean() {
    let mut m = model(micro_config(ClassifierMode::Linear), 13);
    randomize(&mut m.params, 0.5, 13);
    let ep = micro_episode(30);
    let mut tape = Tape::new();
    let l = mc_loss(&mut tape, &m, &ep, &Tensor::zeros(&[2, 5])).unwrap();
    let loss = tape.value(l).item();
    let probs = predict(&m, &ep, PredictMode::Mean, &mut rng(0)).unwrap();
    let ce = ep.query_y.iter().enumerate().map(|(i, &y)| -probs.row(i)[y].ln()).sum::<f64>() / 4.0;
    assert!((loss - ce).abs() < 1e-12);
}

#[test]
fn repeated_mc_samples_match_one_sample() {
    let mut m = model(micro_config(ClassifierMode::Cosine), 14);
    randomize(&mut m.params, 0.5, 14);
    let ep = micro_episode(40);
    let one = draw_noise(&m, 2, 1, &mut rng(5));
    let three = Tensor::matrix(6, 4, one.data().repeat(3)).unwrap();
    let mut tape = Tape::new();
    let a = mc_loss(&mut tape, &m, &ep, &one).unwrap();
    let b = mc_loss(&mut tape, &m, &ep, &three).unwrap();
    assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);
    let a = elbo_loss(&mut tape, &m, &ep, 0.3, &one).unwrap().loss;
    let b = elbo_loss(&mut tape, &m, &ep, 0.3, &three).unwrap().loss;
    assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);
}

#[test]
fn malformed_noise_is_rejected() {
    let m = model(micro_config(ClassifierMode::Cosine), 0);
    let ep = micro_episode(0);
    let mut tape = Tape::new();
    assert!(matches!(mc_loss(&mut tape, &m, &ep, &Tensor::zeros(&[3, 4])), Err(Error::Contract(_))));
    assert!(matches!(mc_loss(&mut tape, &m, &ep, &Tensor::zeros(&[2, 5])), Err(Error::Contract(_))));
}

#[test]
fn aux_loss_examples() {
    let cfg = ModelConfig { aux_classes: Some(7), ..Default::default() };
    let mut m = model(cfg, 15);
    let x = random_rows(9, 16, 1);
    let labels = [0, 1, 2, 3, 4, 5, 6, 0, 1];
    *m.params.get_mut("aux.weight").unwrap() = Tensor::zeros(&[32, 7]);
    let mut tape = Tape::new();
    let l = aux_loss(&mut tape, &m, &x, &labels).unwrap();
    assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-12);

    let mut bias = vec![0.0; 7];
    bias[3] = 60.0;
    *m.params.get_mut("aux.bias").unwrap() = Tensor::vector(bias);
    let mut tape = Tape::new();
    let l = aux_loss(&mut tape, &m, &x, &[3; 9]).unwrap();
    assert!(tape.value(l).item() < 1e-20);

    assert!(matches!(aux_loss(&mut tape, &m, &x, &[7; 9]), Err(Error::Contract(_))));
    let plain = model(ModelConfig::default(), 15);
    assert!(matches!(aux_loss(&mut tape, &plain, &x, &labels), Err(Error::Contract(_))));
}

#[test]
fn aux_probability_examples() {
    assert_eq!(aux_task_probability(0, 1200).unwrap(), 1.0);
    assert!((aux_task_probability(1199, 1200).unwrap() - 0.9f64.powi(11)).abs() < 1e-15);
    assert!((aux_task_probability(1199, 1200).unwrap() - 0.3138).abs() < 1e-4);
    assert_eq!(aux_task_probability(100, 1200).unwrap(), 0.9);
    assert!(matches!(aux_task_probability(5, 5), Err(Error::Contract(_))));
    let mut last = 1.0;
    for t in 0..997 {
        let p = aux_task_probability(t, 997).unwrap();
        assert!(p <= last && p > 0.0);
        last = p;
    }
}

// ------------------------------------------------------------- prediction

#[test]
fn predicted_probabilities_are_distributions() {
    let mut m = model(ModelConfig::default(), 16);
    randomize(&mut m.params, 0.3, 16);
    let ep = sample_episode(&blobs(), &EpisodeSpec::new(5, 5, 15, Split::Test)).unwrap();
    for mode in [PredictMode::Mean, PredictMode::Samples(1), PredictMode::Samples(37)] {
        let p = predict(&m, &ep, mode, &mut rng(2)).unwrap();
        assert_eq!(p.shape(), &[75, 5]);
        for i in 0..75 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12, "{mode}");
            assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
    assert!(matches!(predict(&m, &ep, PredictMode::Samples(0), &mut rng(0)), Err(Error::Contract(_))));
}

#[test]
fn floor_variance_samples_agree_with_the_mean() {
    let mut m = model(ModelConfig::default(), 17);
    randomize(&mut m.params, 0.3, 17);
    floor_variance(&mut m);
    let ep = sample_episode(&blobs(), &EpisodeSpec::new(5, 5, 15, Split::Test)).unwrap();
    let mean = predict(&m, &ep, PredictMode::Mean, &mut rng(0)).unwrap();
    let sampled = predict(&m, &ep, PredictMode::Samples(20), &mut rng(1)).unwrap();
    assert!(mean.max_abs_diff(&sampled) < 1e-2, "{}", mean.max_abs_diff(&sampled));
    assert_eq!(accuracy(&mean, &ep.query_y), accuracy(&sampled, &ep.query_y));
    assert!((track_max_variance(&m, &ep).unwrap() - (-10f64).exp()).abs() < 1e-18);
}

#[test]
fn raising_a_log_variance_never_lowers_the_max() {
    let mut m = model(ModelConfig::default(), 18);
    randomize(&mut m.params, 0.3, 18);
    let ep = sample_episode(&blobs(), &EpisodeSpec::new(5, 5, 15, Split::Train)).unwrap();
    let mut last = track_max_variance(&m, &ep).unwrap();
    for j in 0..32 {
        m.params.get_mut("phi.logvar.bias").unwrap().data_mut()[j] += 0.3;
        let now = track_max_variance(&m, &ep).unwrap();
        assert!(now >= last);
        last = now;
    }
}

#[test]
fn accuracy_counts_argmax_hits() {
    let p = Tensor::matrix(3, 2, vec![0.9, 0.1, 0.4, 0.6, 0.7, 0.3]).unwrap();
    assert_eq!(accuracy(&p, &[0, 1, 1]), 2.0 / 3.0);
}

#[test]
fn predict_mode_parsing() {
    assert_eq!("mean".parse::<PredictMode>().unwrap(), PredictMode::Mean);
    assert_eq!("100".parse::<PredictMode>().unwrap(), PredictMode::Samples(100));
    assert!("0".parse::<PredictMode>().is_err());
    assert!("lots".parse::<PredictMode>().is_err());
    assert_eq!(PredictMode::Samples(10).to_string(), "10");
}

// ------------------------------------------------------------- checkpoints

#[test]
fn checkpoints_round_trip_exactly() {
    for cfg in [
        ModelConfig::default(),
        ModelConfig { classifier: ClassifierMode::Linear, shared: false, ten: true, aux_classes: Some(40), alpha: 3.3, beta: 0.123456789, ..Default::default() },
        ModelConfig { hidden: vec![], ..micro_config(ClassifierMode::Cosine) },
    ] {
        let mut m = model(cfg, 19);
        randomize(&mut m.params, 1.0 / 3.0, 19);
        let mut buf = Vec::new();
        save_checkpoint(&m, &mut buf).unwrap();
        assert!(buf.starts_with(CHECKPOINT_HEADER.as_bytes()));
        let back = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }
}

#[test]
fn checkpoint_problems_are_reported() {
    let m = model(ModelConfig::default(), 20);
    let mut buf = Vec::new();
    save_checkpoint(&m, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();

    let v2 = text.replacen("samovar-ckpt v1", "samovar-ckpt v2", 1);
    assert!(matches!(load_checkpoint(v2.as_bytes()), Err(Error::Checkpoint(_))));
    let unknown = text.replacen("config ten=", "config tenn=", 1);
    assert!(matches!(load_checkpoint(unknown.as_bytes()), Err(Error::Checkpoint(_))));
    let missing: String = text.lines().filter(|l| !l.starts_with("param phi.mean.bias")).map(|l| format!("{l}\n")).collect();
    assert!(matches!(load_checkpoint(missing.as_bytes()), Err(Error::Checkpoint(_))));
    let reshaped = text.replacen("config feature_dim=32", "config feature_dim=31", 1);
    assert!(matches!(load_checkpoint(reshaped.as_bytes()), Err(Error::Checkpoint(_))));
    assert!(matches!(load_checkpoint(&b""[..]), Err(Error::Checkpoint(_))));
}

// ---------------------------------------------------------------- training

fn quick(objective: TrainObjective) -> TrainConfig {
    TrainConfig {
        episodes: 300,
        objective,
        log_every: 10,
        val_every: 100,
        val_episodes: 20,
        way: 3,
        shot: 3,
        queries: 5,
        hidden: vec![16],
        feature_dim: 8,
        inference_width: 8,
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic() {
    let ds = small_blobs();
    for objective in [TrainObjective::Elbo, TrainObjective::Mc] {
        let cfg = TrainConfig { episodes: 60, ten: true, aux: true, ..quick(objective) };
        let a = train_fewshot(&cfg, &ds).unwrap();
        let b = train_fewshot(&cfg, &ds).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        let c = train_fewshot(&TrainConfig { seed: 1, ..cfg }, &ds).unwrap();
        assert_ne!(a.model, c.model);
    }
}

#[test]
fn history_rows_follow_the_logging_schedule() {
    let cfg = TrainConfig { episodes: 95, log_every: 10, val_every: 40, ..quick(TrainObjective::Elbo) };
    let run = train_fewshot(&cfg, &small_blobs()).unwrap();
    let logged: Vec<usize> = run.history.iter().map(|r| r.episode).collect();
    let mut expect: Vec<usize> = (0..95).step_by(10).chain([39, 79, 94]).collect();
    expect.sort();
    expect.dedup();
    assert_eq!(logged, expect);
    for r in &run.history {
        assert_eq!(r.val_accuracy.is_some(), [39, 79, 94].contains(&r.episode));
        assert!(r.max_prior_variance > 0.0 && r.loss.is_finite());
    }
    assert_eq!(run.history[0].max_prior_variance, 1.0);
}

#[test]
fn elbo_training_reduces_the_loss() {
    let ds = blobs();
    let run = train_fewshot(&quick(TrainObjective::Elbo), &ds).unwrap();
    let early: f64 = run.history[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    let n = run.history.len();
    let late: f64 = run.history[n - 5..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    assert!(late < 0.5 * early, "{early} -> {late}");
    let last = run.history.last().unwrap();
    assert!(last.val_accuracy.unwrap() > 0.8);
    assert!(last.kl >= 0.0);
}

#[test]
fn separate_networks_and_linear_mode_train() {
    let ds = blobs();
    for cfg in [
        TrainConfig { shared: false, ..quick(TrainObjective::Elbo) },
        TrainConfig { classifier: ClassifierMode::Linear, episodes: 1000, ..quick(TrainObjective::Elbo) },
        TrainConfig { samples: 4, query_mode: QueryMode::Uniform, ..quick(TrainObjective::Mc) },
    ] {
        let run = train_fewshot(&cfg, &ds).unwrap();
        let last = run.history.last().unwrap();
        assert!(last.val_accuracy.unwrap() > 0.7, "{cfg:?}: {last:?}");
    }
}

#[test]
fn divergence_aborts_with_the_episode() {
    let cfg = TrainConfig {
        lr: 1e4,
        clip_norm: 0.0,
        classifier: ClassifierMode::Linear,
        ..quick(TrainObjective::Elbo)
    };
    match train_fewshot(&cfg, &blobs()) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("episode"), "{msg}"),
        other => panic!("expected a numerical failure, got {:?}", other.map(|r| r.history.len())),
    }
}

#[test]
fn invalid_training_configs_are_rejected() {
    let ds = small_blobs();
    let bad = [
        TrainConfig { episodes: 0, ..Default::default() },
        TrainConfig { samples: 0, ..Default::default() },
        TrainConfig { way: 10, ..Default::default() },
    ];
    for cfg in bad {
        assert!(train_fewshot(&cfg, &ds).is_err(), "{cfg:?}");
    }
    assert!(matches!(TrainConfig { lr: 0.0, ..Default::default() }.validate(), Err(Error::Domain(_))));
    assert!(matches!(TrainConfig { alpha: -1.0, ..Default::default() }.validate(), Err(Error::Domain(_))));
}

#[test]
fn automatic_beta_is_queries_over_feature_dim() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.resolved_beta(), 15.0 / 32.0);
    assert_eq!(TrainConfig { beta: Beta::Value(0.25), ..cfg }.resolved_beta(), 0.25);
    assert_eq!("auto".parse::<Beta>().unwrap(), Beta::Auto);
    assert!(matches!("-1".parse::<Beta>(), Err(Error::Domain(_))));
    assert_eq!("mc".parse::<TrainObjective>().unwrap(), TrainObjective::Mc);
}

#[test]
fn evaluation_is_reproducible() {
    let ds = small_blobs();
    let run = train_fewshot(&TrainConfig { episodes: 50, ..quick(TrainObjective::Elbo) }, &ds).unwrap();
    let spec = EpisodeSpec::new(3, 2, 4, Split::Test);
    let a = evaluate(&run.model, &ds, &spec, 30, PredictMode::Samples(5), 9).unwrap();
    let b = evaluate(&run.model, &ds, &spec, 30, PredictMode::Samples(5), 9).unwrap();
    assert_eq!(a.per_episode, b.per_episode);
    assert!((0.0..=1.0).contains(&a.mean) && a.ci95 >= 0.0);
}
