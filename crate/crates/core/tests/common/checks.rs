//! Checks shared by the topical test files and the acceptance runner. Each
//! returns `Err` with a description of the first mismatch.

use std::path::Path;
use std::process::Command;

use mixdl::autograd::Graph;
use mixdl::data::make_synthetic_fewshot;
use mixdl::losses::{
    discriminator_distance_loss, discriminator_distance_loss_with_grad, generator_distance_loss,
    ProjectionHead,
};
use mixdl::metrics::{
    frechet_distance, knn_precision_recall, nn_mode_count, pairwise_diversity, ppl_uniformity,
    PixelL2,
};
use mixdl::mixup::{
    anchor_latent, sample_coefficients, target_distribution, CoefficientSource, LatentBatch,
    LatentSpace, MixupCoefficients,
};
use mixdl::models::{Generator, ModelConfig};
use mixdl::similarity::{
    cosine_similarity, kl_divergence, similarity_profile, FeatureLayer, FeatureStack, ProbVector,
};
use mixdl::tensor::Tensor;
use mixdl::train::{Phase, PlainGanTrainer, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Check = std::result::Result<(), String>;

fn coeff(v: &[f64]) -> MixupCoefficients {
    MixupCoefficients::new(v.to_vec(), CoefficientSource::Dirichlet, vec![1.0]).unwrap()
}

fn prob(v: &[f64]) -> ProbVector {
    ProbVector::new(v.to_vec()).unwrap()
}

fn single(anchor: Vec<f64>, batch: Vec<Vec<f64>>) -> FeatureStack {
    FeatureStack::new(vec![FeatureLayer {
        id: "l0".into(),
        anchor,
        batch,
    }])
    .unwrap()
}

fn on_simplex(what: &str, v: &[f64]) -> Check {
    ensure(v.iter().all(|x| *x >= 0.0), || format!("{what}: negative entry in {v:?}"))?;
    close(&format!("{what} sum"), v.iter().sum(), 1.0, 1e-9)
}

fn vec_close(what: &str, got: &[f64], want: &[f64], tol: f64) -> Check {
    ensure(got.len() == want.len(), || format!("{what}: length {} vs {}", got.len(), want.len()))?;
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        close(&format!("{what}[{i}]"), *g, *w, tol)?;
    }
    Ok(())
}

pub fn mixup_examples() -> Check {
    let c = sample_coefficients(4, CoefficientSource::Dirichlet, &[1.0; 4], &mut rng(7)).unwrap();
    ensure(c.n() == 4, || "n=4 draw has wrong length".into())?;
    on_simplex("n=4 dirichlet draw", c.values())?;
    let one = sample_coefficients(1, CoefficientSource::Dirichlet, &[1.0], &mut rng(3)).unwrap();
    ensure(one.values() == [1.0], || format!("n=1 draw is {:?}", one.values()))?;

    let mut r = rng(11);
    let mut mean = [0.0; 3];
    for _ in 0..10_000 {
        let c = sample_coefficients(3, CoefficientSource::Dirichlet, &[1.0; 3], &mut r).unwrap();
        for (m, v) in mean.iter_mut().zip(c.values()) {
            *m += v / 10_000.0;
        }
    }
    for (i, m) in mean.iter().enumerate() {
        close(&format!("Dir(1,1,1) mean[{i}]"), *m, 1.0 / 3.0, 0.02)?;
    }

    let z = |v: Vec<Vec<f64>>| LatentBatch::new(v, LatentSpace::Prior).unwrap();
    let e2 = z(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let a = anchor_latent(&e2, &coeff(&[1.0, 0.0])).unwrap();
    ensure(a.values == [1.0, 0.0], || format!("one-hot anchor {:?}", a.values))?;
    let a = anchor_latent(&e2, &coeff(&[0.5, 0.5])).unwrap();
    ensure(a.values == [0.5, 0.5], || format!("midpoint anchor {:?}", a.values))?;
    let three = z(vec![vec![2.0, 0.0], vec![0.0, 4.0], vec![1.0, 1.0]]);
    let a = anchor_latent(&three, &coeff(&[0.25, 0.25, 0.5])).unwrap();
    vec_close("weighted anchor", &a.values, &[1.0, 1.5], 1e-12)?;
    let mapped = LatentBatch::new(vec![vec![1.0], vec![2.0]], LatentSpace::Mapped).unwrap();
    ensure(
        anchor_latent(&mapped, &coeff(&[0.5, 0.5])).unwrap().space == LatentSpace::Mapped,
        || "anchor lost its space tag".into(),
    )?;

    vec_close("target [.5,.5]", target_distribution(&coeff(&[0.5, 0.5])).probs(), &[0.5, 0.5], 1e-12)?;
    let t = target_distribution(&coeff(&[1.0, 0.0]));
    vec_close("target [1,0]", t.probs(), &softmax(&[1.0, 0.0]), 1e-12)?;
    vec_close("target [1,0] stated", t.probs(), &[0.7311, 0.2689], 1e-4)?;
    let t = target_distribution(&coeff(&[0.7, 0.3]));
    vec_close("target [.7,.3]", t.probs(), &softmax(&[0.7, 0.3]), 1e-12)?;
    vec_close("target [.7,.3] stated", t.probs(), &[0.5987, 0.4013], 1e-4)
}

/// Simplex, equivariance, monotonicity and one-hot properties over seeded
/// random instances.
pub fn mixup_properties(instances: usize) -> Check {
    for source in [CoefficientSource::Dirichlet, CoefficientSource::Gaussian, CoefficientSource::Uniform] {
        let mut r = rng(100);
        for i in 0..10_000 {
            let n = 2 + i % 9;
            let c = sample_coefficients(n, source, &[1.0], &mut r).unwrap();
            on_simplex(&format!("{source:?} draw {i}"), c.values())?;
        }
    }
    let mut r = rng(101);
    for i in 0..instances {
        let n = r.random_range(2..9);
        let d = r.random_range(1..6);
        let c = sample_coefficients(n, CoefficientSource::Dirichlet, &[0.5], &mut r).unwrap();
        let zs: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, d)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);

        let batch = LatentBatch::new(zs.clone(), LatentSpace::Prior).unwrap();
        let pz = LatentBatch::new(perm.iter().map(|&j| zs[j].clone()).collect(), LatentSpace::Prior).unwrap();
        let pc = c.permuted(&perm).unwrap();
        let a = anchor_latent(&batch, &c).unwrap().values;
        let pa = anchor_latent(&pz, &pc).unwrap().values;
        vec_close(&format!("instance {i} permuted anchor"), &pa, &a, 1e-12)?;

        let t = target_distribution(&c);
        let pt = target_distribution(&pc);
        let want: Vec<f64> = perm.iter().map(|&j| t.probs()[j]).collect();
        vec_close(&format!("instance {i} permuted target"), pt.probs(), &want, 1e-15)?;
        for x in 0..n {
            for y in 0..n {
                if c.values()[x] > c.values()[y] {
                    ensure(t.probs()[x] > t.probs()[y], || format!("instance {i}: target not monotone"))?;
                }
            }
        }

        let hot = r.random_range(0..n);
        let a = anchor_latent(&batch, &MixupCoefficients::one_hot(n, hot).unwrap()).unwrap();
        ensure(
            a.values.iter().zip(&zs[hot]).all(|(x, y)| x.to_bits() == y.to_bits()),
            || format!("instance {i}: one-hot anchor is not bitwise z_{hot}"),
        )?;
    }
    Ok(())
}

pub fn similarity_examples() -> Check {
    close("cos(u,u)", cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0, 1e-12)?;
    close("cos(e1,e2)", cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0, 1e-12)?;
    close("cos((1,2),(2,1))", cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.8, 1e-9)?;

    let q = similarity_profile(&[1.0, 0.0], &[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    vec_close("opposed profile", q.probs(), &softmax(&[1.0, -1.0]), 1e-12)?;
    vec_close("opposed profile stated", q.probs(), &[0.8808, 0.1192], 1e-4)?;
    let v = vec![0.3, -1.2, 2.0];
    let q = similarity_profile(&v, &[v.clone(), v.clone(), v.clone()]).unwrap();
    vec_close("equal profile", q.probs(), &[1.0 / 3.0; 3], 1e-12)?;
    let q = similarity_profile(&[1.0, 1.0], &[vec![2.0, 2.0], vec![5.0, 5.0]]).unwrap();
    vec_close("scaled profile", q.probs(), &[0.5, 0.5], 1e-12)?;

    let q = prob(&[0.2, 0.5, 0.3]);
    close("kl(q,q)", kl_divergence(&q, &q).unwrap(), 0.0, 1e-12)?;
    let p = prob(&[0.7311, 0.2689]);
    let got = kl_divergence(&prob(&[0.5, 0.5]), &p).unwrap();
    close("kl([.5,.5],[.7311,.2689])", got, kl(&[0.5, 0.5], &[0.7311, 0.2689]), 1e-12)?;
    close("kl([.5,.5],[.7311,.2689]) stated", got, 0.1201, 1e-3)?;
    let u = prob(&[1.0 / 3.0; 3]);
    close("kl(uniform,uniform)", kl_divergence(&u, &u).unwrap(), 0.0, 0.0)
}

pub fn similarity_properties(instances: usize) -> Check {
    let mut r = rng(202);
    for i in 0..instances {
        let n = r.random_range(2..9);
        let d = r.random_range(1..7);
        let anchor = gaussian_vec(&mut r, d);
        let batch: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, d)).collect();
        let q = similarity_profile(&anchor, &batch).unwrap();
        on_simplex(&format!("instance {i} profile"), q.probs())?;
        let want: Vec<f64> = softmax(&batch.iter().map(|b| cosine(&anchor, b)).collect::<Vec<_>>());
        vec_close(&format!("instance {i} profile oracle"), q.probs(), &want, 1e-12)?;

        let s: f64 = r.random_range(0.01..100.0);
        let scaled_anchor: Vec<f64> = anchor.iter().map(|x| x * s).collect();
        let mut scaled_batch = batch.clone();
        let k = r.random_range(0..n);
        let t: f64 = r.random_range(0.01..100.0);
        scaled_batch[k].iter_mut().for_each(|x| *x *= t);
        let qs = similarity_profile(&scaled_anchor, &scaled_batch).unwrap();
        vec_close(&format!("instance {i} scale invariance"), qs.probs(), q.probs(), 1e-12)?;

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pb: Vec<Vec<f64>> = perm.iter().map(|&j| batch[j].clone()).collect();
        let qp = similarity_profile(&anchor, &pb).unwrap();
        let want: Vec<f64> = perm.iter().map(|&j| q.probs()[j]).collect();
        vec_close(&format!("instance {i} permutation"), qp.probs(), &want, 1e-15)?;

        let p = prob(&softmax(&gaussian_vec(&mut r, n)));
        let d_qp = kl_divergence(&q, &p).unwrap();
        ensure(d_qp >= 0.0, || format!("instance {i}: KL {d_qp} < 0"))?;
        close(&format!("instance {i} KL oracle"), d_qp, kl(q.probs(), p.probs()).max(0.0), 1e-12)?;
        let gap = q.probs().iter().zip(p.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap >= 1e-12 {
            ensure(d_qp > 0.0, || format!("instance {i}: distinct distributions with zero KL"))?;
        }
        ensure(kl_divergence(&q, &q).unwrap() == 0.0, || format!("instance {i}: KL(q,q) != 0"))?;
    }
    Ok(())
}

pub fn loss_examples() -> Check {
    // batch rows at cosine c_i to the anchor, so every profile is softmax(c)
    let c = coeff(&[0.2, 0.3, 0.5]);
    let rows: Vec<Vec<f64>> = c.values().iter().map(|v| vec![*v, (1.0 - v * v).sqrt()]).collect();
    let stack = FeatureStack::new(
        (0..3)
            .map(|l| FeatureLayer {
                id: format!("l{l}"),
                anchor: vec![1.0, 0.0],
                batch: rows.clone(),
            })
            .collect(),
    )
    .unwrap();
    close("matched profile loss", generator_distance_loss(&stack, &c).unwrap(), 0.0, 1e-12)?;

    let anchor = vec![1.0, 0.0];
    let batch = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
    let half = coeff(&[0.5, 0.5]);
    let want = kl(&softmax(&[1.0, -1.0]), &[0.5, 0.5]);
    let one = generator_distance_loss(&single(anchor.clone(), batch.clone()), &half).unwrap();
    close("single-layer generator loss", one, want, 1e-12)?;
    close("single-layer generator loss (oracle rounded)", one, 0.32781, 1e-3)?;
    let two = FeatureStack::new(vec![
        FeatureLayer { id: "a".into(), anchor: anchor.clone(), batch: batch.clone() },
        FeatureLayer { id: "b".into(), anchor: anchor.clone(), batch: batch.clone() },
    ])
    .unwrap();
    close("two identical layers", generator_distance_loss(&two, &half).unwrap(), one, 1e-15)?;

    let head = ProjectionHead::identity(2);
    let d = discriminator_distance_loss(&anchor, &batch, &head, &half).unwrap();
    close("identity-head discriminator loss", d, want, 1e-12)?;
    let same = vec![vec![0.4, -0.1]; 4];
    let u = coeff(&[0.25; 4]);
    let z = discriminator_distance_loss(&[0.4, -0.1], &same, &head, &u).unwrap();
    close("identical projected features", z, 0.0, 1e-12)?;
    let mut r = rng(5);
    let head = ProjectionHead::random(3, 4, &mut r);
    let pens: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut r, 3)).collect();
    let ap = gaussian_vec(&mut r, 3);
    let c = coeff(&[0.6, 0.1, 0.3]);
    let base = discriminator_distance_loss(&ap, &pens, &head, &c).unwrap();
    let perm = [2, 0, 1];
    let pp: Vec<Vec<f64>> = perm.iter().map(|&j| pens[j].clone()).collect();
    let moved = discriminator_distance_loss(&ap, &pp, &head, &c.permuted(&perm).unwrap()).unwrap();
    close("discriminator joint permutation", moved, base, 1e-12)
}

pub fn loss_properties(instances: usize) -> Check {
    let mut r = rng(303);
    for i in 0..instances {
        let n = r.random_range(2..9);
        let layers = r.random_range(1..4);
        let c = sample_coefficients(n, CoefficientSource::Dirichlet, &[1.0], &mut r).unwrap();
        let stack_layers: Vec<FeatureLayer> = (0..layers)
            .map(|l| {
                let d = r.random_range(1..8);
                FeatureLayer {
                    id: format!("l{l}"),
                    anchor: gaussian_vec(&mut r, d),
                    batch: (0..n).map(|_| gaussian_vec(&mut r, d)).collect(),
                }
            })
            .collect();
        let stack = FeatureStack::new(stack_layers.clone()).unwrap();
        let lg = generator_distance_loss(&stack, &c).unwrap();
        let t = softmax(c.values());
        let want = stack_layers
            .iter()
            .map(|l| kl(&softmax(&l.batch.iter().map(|b| cosine(&l.anchor, b)).collect::<Vec<_>>()), &t).max(0.0))
            .sum::<f64>()
            / layers as f64;
        ensure(lg >= 0.0, || format!("instance {i}: generator loss {lg} < 0"))?;
        close(&format!("instance {i} generator loss oracle"), lg, want, 1e-12)?;

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pc = c.permuted(&perm).unwrap();
        let pstack = FeatureStack::new(
            stack_layers
                .iter()
                .map(|l| FeatureLayer {
                    id: l.id.clone(),
                    anchor: l.anchor.clone(),
                    batch: perm.iter().map(|&j| l.batch[j].clone()).collect(),
                })
                .collect(),
        )
        .unwrap();
        close(&format!("instance {i} generator permutation"), generator_distance_loss(&pstack, &pc).unwrap(), lg, 1e-12)?;

        let (din, dout) = (r.random_range(1..6), r.random_range(1..6));
        let head = ProjectionHead::random(din, dout, &mut r);
        let ap = gaussian_vec(&mut r, din);
        let bp: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, din)).collect();
        let ld = match discriminator_distance_loss(&ap, &bp, &head, &c) {
            Ok(v) => v,
            // a random head can map a feature to exactly zero only by accident
            Err(e) => return Err(format!("instance {i}: {e}")),
        };
        ensure(ld >= 0.0, || format!("instance {i}: discriminator loss {ld} < 0"))?;
        let pbp: Vec<Vec<f64>> = perm.iter().map(|&j| bp[j].clone()).collect();
        close(&format!("instance {i} discriminator permutation"), discriminator_distance_loss(&ap, &pbp, &head, &pc).unwrap(), ld, 1e-12)?;
    }
    Ok(())
}

fn matvec(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bi)| (bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).tanh())
        .collect()
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Two tanh layers, `D_z = 4`, `N = 3`: graph gradient of the generator loss
/// with respect to the raw latents against central differences of the plain
/// forward pass. Returns the relative error.
pub fn generator_mlp_gradient() -> std::result::Result<f64, String> {
    let mut r = rng(404);
    let (n, dz, h1, h2) = (3, 4, 6, 5);
    let w1: Vec<Vec<f64>> = (0..h1).map(|_| gaussian_vec(&mut r, dz)).collect();
    let b1 = gaussian_vec(&mut r, h1);
    let w2: Vec<Vec<f64>> = (0..h2).map(|_| gaussian_vec(&mut r, h1)).collect();
    let b2 = gaussian_vec(&mut r, h2);
    let z: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, dz)).collect();
    let c = coeff(&[0.5, 0.2, 0.3]);

    let forward = |zf: &[f64]| -> f64 {
        let zs: Vec<Vec<f64>> = zf.chunks(dz).map(<[f64]>::to_vec).collect();
        let a: Vec<f64> = (0..dz).map(|k| (0..n).map(|i| c.values()[i] * zs[i][k]).sum()).collect();
        let l1: Vec<Vec<f64>> = zs.iter().map(|x| matvec(&w1, &b1, x)).collect();
        let a1 = matvec(&w1, &b1, &a);
        let l2: Vec<Vec<f64>> = l1.iter().map(|x| matvec(&w2, &b2, x)).collect();
        let a2 = matvec(&w2, &b2, &a1);
        let stack = FeatureStack::new(vec![
            FeatureLayer { id: "h1".into(), anchor: a1, batch: l1 },
            FeatureLayer { id: "h2".into(), anchor: a2, batch: l2 },
        ])
        .unwrap();
        generator_distance_loss(&stack, &c).unwrap()
    };

    let mut g = Graph::new();
    let zv = g.leaf(Tensor::new(vec![n, dz], flat(&z)), true);
    let w1v = g.constant(Tensor::new(vec![h1, dz], flat(&w1)));
    let b1v = g.constant(Tensor::new(vec![h1], b1.clone()));
    let w2v = g.constant(Tensor::new(vec![h2, h1], flat(&w2)));
    let b2v = g.constant(Tensor::new(vec![h2], b2.clone()));
    let anchor = g.mix_rows(zv, c.values()).unwrap();
    let x = g.concat_rows(&[zv, anchor]);
    let l1 = g.linear(x, w1v, Some(b1v));
    let t1 = g.tanh(l1);
    let l2 = g.linear(t1, w2v, Some(b2v));
    let t2 = g.tanh(l2);
    let target = target_distribution(&c);
    let k1 = g.profile_kl(t1, n, &[0, 1, 2], &target).unwrap();
    let k2 = g.profile_kl(t2, n, &[0, 1, 2], &target).unwrap();
    let s = g.add(k1, k2);
    let loss = g.scale(s, 0.5);
    close("graph vs plain generator loss", g.value(loss).item(), forward(&flat(&z)), 1e-12)?;
    let grads = g.backward(loss);
    let analytic = grads.get(zv).ok_or("no latent gradient")?.data().to_vec();
    let numeric = central_diff(&flat(&z), 1e-5, forward);
    ensure(analytic.iter().any(|v| *v != 0.0), || "latent gradient is zero".into())?;
    Ok(relative_error(&analytic, &numeric))
}

/// The same check through the reference convolutional generator with a
/// two-layer mapping network.
pub fn generator_reference_gradient() -> std::result::Result<f64, String> {
    let gen = Generator::build(8, 4, 2, 4, &mut rng(405)).map_err(|e| e.to_string())?;
    let mut r = rng(406);
    let n = 3;
    let z: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, 4)).collect();
    let c = coeff(&[0.25, 0.45, 0.3]);
    let batch: Vec<usize> = (0..n).collect();

    let forward = |zf: &[f64]| -> f64 {
        let zs: Vec<Vec<f64>> = zf.chunks(4).map(<[f64]>::to_vec).collect();
        let w = gen.map_latent(&zs).unwrap();
        let a = anchor_latent(&LatentBatch::new(w.clone(), LatentSpace::Mapped).unwrap(), &c).unwrap();
        let mut all = w;
        all.push(a.values);
        let syn = gen.synthesize(&all).unwrap();
        generator_distance_loss(&syn.feature_stack(n, &batch).unwrap(), &c).unwrap()
    };

    let mut g = Graph::new();
    let vars = gen.params().bind(&mut g, false);
    let zv = g.leaf(Tensor::new(vec![n, 4], flat(&z)), true);
    let w = gen.map_latent_graph(&mut g, &vars, zv);
    let a = g.mix_rows(w, c.values()).unwrap();
    let all = g.concat_rows(&[w, a]);
    let syn = gen.synthesize_graph(&mut g, &vars, all);
    let target = target_distribution(&c);
    let mut terms = Vec::new();
    for (_, tap) in &syn.taps {
        terms.push(g.profile_kl(*tap, n, &batch, &target).unwrap());
    }
    let count = terms.len();
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t);
    }
    let loss = g.scale(total, 1.0 / count as f64);
    close("graph vs plain reference loss", g.value(loss).item(), forward(&flat(&z)), 1e-12)?;
    let grads = g.backward(loss);
    let analytic = grads.get(zv).ok_or("no latent gradient")?.data().to_vec();
    ensure(analytic.iter().map(|v| v * v).sum::<f64>() > 0.0, || "latent gradient is zero".into())?;
    Ok(relative_error(&analytic, &central_diff(&flat(&z), 1e-5, forward)))
}

/// Gradient of the discriminator loss with respect to the projection weight
/// and bias, from both the closed-form routine and the autograd graph.
pub fn discriminator_gradient() -> std::result::Result<f64, String> {
    let mut r = rng(407);
    let (n, din, dout) = (3, 4, 5);
    let wdata = gaussian_vec(&mut r, dout * din);
    let bias = gaussian_vec(&mut r, dout);
    let ap = gaussian_vec(&mut r, din);
    let bp: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, din)).collect();
    let c = coeff(&[0.1, 0.6, 0.3]);
    let head = |w: &[f64], b: &[f64]| ProjectionHead::new(Tensor::new(vec![dout, din], w.to_vec()), b.to_vec()).unwrap();

    let num_w = central_diff(&wdata, 1e-5, |w| discriminator_distance_loss(&ap, &bp, &head(w, &bias), &c).unwrap());
    let num_b = central_diff(&bias, 1e-5, |b| discriminator_distance_loss(&ap, &bp, &head(&wdata, b), &c).unwrap());
    let closed = discriminator_distance_loss_with_grad(&ap, &bp, &head(&wdata, &bias), &c).map_err(|e| e.to_string())?;

    let mut g = Graph::new();
    let mut rows = bp.clone();
    rows.push(ap.clone());
    let pen = g.constant(Tensor::new(vec![n + 1, din], flat(&rows)));
    let wv = g.leaf(Tensor::new(vec![dout, din], wdata.clone()), true);
    let bv = g.leaf(Tensor::new(vec![dout], bias.clone()), true);
    let proj = g.linear(pen, wv, Some(bv));
    let loss = g.profile_kl(proj, n, &[0, 1, 2], &target_distribution(&c)).unwrap();
    close("graph vs closed-form discriminator loss", g.value(loss).item(), closed.loss, 1e-12)?;
    let grads = g.backward(loss);

    let numeric = [num_w.clone(), num_b.clone()].concat();
    let from_closed = [closed.weight.clone(), closed.bias.clone()].concat();
    let from_graph = [
        grads.get(wv).ok_or("no weight gradient")?.data().to_vec(),
        grads.get(bv).ok_or("no bias gradient")?.data().to_vec(),
    ]
    .concat();
    Ok(relative_error(&from_closed, &numeric).max(relative_error(&from_graph, &numeric)))
}

pub fn frechet_checks() -> Check {
    let a = moment_matched(50, 0.0, 1.0);
    let b = moment_matched(70, 2.0, 1.0);
    let c = moment_matched(40, 0.0, 2.0);
    close("FID N(0,1) vs N(2,1)", frechet_distance(&a, &b).unwrap(), 4.0, 1e-6)?;
    close("FID N(0,1) vs N(0,4)", frechet_distance(&a, &c).unwrap(), 1.0, 1e-6)?;
    close("FID identical", frechet_distance(&a, &a).unwrap(), 0.0, 1e-8)?;
    let mut r = rng(500);
    for i in 0..10 {
        let d = r.random_range(1..6);
        let x: Vec<Vec<f64>> = (0..r.random_range(2..40)).map(|_| gaussian_vec(&mut r, d)).collect();
        let y: Vec<Vec<f64>> = (0..r.random_range(2..40))
            .map(|_| gaussian_vec(&mut r, d).iter().map(|v| 1.5 * v + 0.3).collect())
            .collect();
        let (xy, yx) = (frechet_distance(&x, &y).unwrap(), frechet_distance(&y, &x).unwrap());
        ensure(xy >= 0.0, || format!("set {i}: negative FID {xy}"))?;
        close(&format!("set {i} FID symmetry"), xy, yx, 1e-8)?;
    }
    ensure(frechet_distance(&a[..1], &b).is_err(), || "single-row set accepted".into())
}

pub fn knn_checks() -> Check {
    let mut r = rng(600);
    for i in 0..20 {
        let nr = r.random_range(6..=64);
        let nf = r.random_range(6..=64);
        let k = r.random_range(1..=5);
        let d = r.random_range(1..=4);
        let real: Vec<Vec<f64>> = (0..nr).map(|_| gaussian_vec(&mut r, d)).collect();
        let shift: f64 = r.random_range(0.0..2.0);
        let fake: Vec<Vec<f64>> = (0..nf)
            .map(|_| gaussian_vec(&mut r, d).iter().map(|v| v + shift).collect())
            .collect();
        let got = knn_precision_recall(&real, &fake, k).unwrap();
        let want = knn_oracle(&real, &fake, k);
        ensure(got == want, || format!("instance {i} (n={nr}/{nf}, k={k}): {got:?} vs oracle {want:?}"))?;
    }
    let pts: Vec<Vec<f64>> = (0..64).map(|_| gaussian_vec(&mut r, 3)).collect();
    let other: Vec<Vec<f64>> = (0..64).map(|_| gaussian_vec(&mut r, 3)).collect();
    let got = knn_precision_recall(&pts, &other, 3).unwrap();
    ensure(got == knn_oracle(&pts, &other, 3), || format!("64-point instance: {got:?}"))?;
    ensure(knn_precision_recall(&pts, &pts, 3).unwrap() == (1.0, 1.0), || "fake = real is not (1, 1)".into())?;

    let blob = |r: &mut ChaCha8Rng, centre: f64| -> Vec<Vec<f64>> {
        (0..16).map(|_| gaussian_vec(r, 2).iter().map(|v| centre + v).collect()).collect()
    };
    let (x, y) = (blob(&mut r, 0.0), blob(&mut r, 1e6));
    let got = knn_precision_recall(&x, &y, 3).unwrap();
    ensure(got == (0.0, 0.0), || format!("separated clusters: {got:?}"))?;
    ensure(got == knn_oracle(&x, &y, 3), || "separated clusters disagree with oracle".into())?;
    ensure(knn_precision_recall(&x[..3], &y, 3).is_err(), || "set of size k accepted".into())
}

pub fn mode_and_diversity_checks() -> Check {
    let train = make_synthetic_fewshot(0, 10, 8).unwrap().images().to_vec();
    let mut r = rng(700);
    let noise: Vec<Image> = (0..500)
        .map(|_| Image::new(3, 8, 8, (0..192).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let got = nn_mode_count(&noise, &train, &PixelL2).unwrap();
    let want = mode_oracle(&noise, &train);
    ensure(got == want, || format!("noise mode count {got} vs oracle {want}"))?;
    ensure((1..=10).contains(&got), || format!("mode count {got} out of range"))?;
    let copies = vec![train[3].clone(); 20];
    ensure(nn_mode_count(&copies, &train, &PixelL2).unwrap() == 1, || "copies of one image".into())?;
    ensure(nn_mode_count(&train, &train, &PixelL2).unwrap() == 10, || "training set against itself".into())?;

    let four = &train[..4];
    close("diversity of 4", pairwise_diversity(four, &PixelL2).unwrap(), diversity_oracle(four), 1e-12)?;
    close("diversity of copies", pairwise_diversity(&copies, &PixelL2).unwrap(), 0.0, 0.0)
}

pub fn ppl_checks() -> Check {
    let lin = LinearGenerator::new(800, 5);
    let res = ppl_uniformity(&lin, 50, &PixelL2, &mut rng(801)).unwrap();
    ensure(res.subinterval_std < 1e-9, || format!("linear subinterval_std {}", res.subinterval_std))?;
    let ratio = res.endpoint_mean / (10.0 * res.subinterval_mean);
    close("endpoint / (10 × subinterval)", ratio, 1.0, 1e-6)?;

    // on a single path the subinterval metric is 100 × the raw segment distance
    let one = ppl_uniformity(&lin, 1, &PixelL2, &mut rng(802)).unwrap();
    let mut r2 = rng(802);
    let a = lin.sample_endpoint(&mut r2).unwrap();
    let b = lin.sample_endpoint(&mut r2).unwrap();
    let p = |t: f64| -> Vec<f64> { a.iter().zip(&b).map(|(x, y)| x + t * (y - x)).collect() };
    let raw = rms(&lin.image(&p(0.0)), &lin.image(&p(0.1)));
    close("subinterval = 100 × raw", one.subinterval_mean / (100.0 * raw), 1.0, 1e-9)
}

fn bits_equal(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

/// Regularizer-off trainer against the plain GAN trainer for `adv_steps`
/// adversarial updates: every adversarial record and the final parameters
/// must match bit for bit, and every mixup record must be empty.
pub fn regularizer_off(model: ModelConfig, train: TrainConfig, adv_steps: usize) -> Check {
    let data = make_synthetic_fewshot(1, 10, model.resolution).unwrap();
    let off_cfg = TrainConfig {
        lambda_g: 0.0,
        lambda_d: 0.0,
        patch_phase: false,
        ..train.clone()
    };
    let mut off = Trainer::new(off_cfg, model.clone(), data.clone()).map_err(|e| e.to_string())?;
    let mut plain = PlainGanTrainer::new(train, model, data).map_err(|e| e.to_string())?;
    let mut r1_seen = false;
    for i in 0..2 * adv_steps {
        let rec = off.step().map_err(|e| e.to_string())?;
        match rec.phase {
            Phase::Adversarial => {
                let p = plain.step().map_err(|e| e.to_string())?;
                let pairs = [
                    (rec.adv_g, p.adv_g),
                    (rec.adv_d, p.adv_d),
                    (rec.dist_g, p.dist_g),
                    (rec.dist_d, p.dist_d),
                    (rec.r1, p.r1),
                ];
                ensure(pairs.iter().all(|(a, b)| bits_equal(*a, *b)), || {
                    format!("step {i}: {rec:?} vs plain {p:?}")
                })?;
                r1_seen |= rec.r1 != 0.0;
            }
            Phase::Mixup => {
                ensure(
                    [rec.adv_g, rec.adv_d, rec.dist_g, rec.dist_d, rec.r1].iter().all(|v| *v == 0.0),
                    || format!("step {i}: disabled mixup step recorded {rec:?}"),
                )?;
            }
        }
    }
    ensure(r1_seen, || "no R1 step was exercised".into())?;
    let same = |a: &mixdl::models::ParamSet, b: &mixdl::models::ParamSet| {
        a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| {
            na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| bits_equal(*x, *y))
        })
    };
    let (s, p) = (off.state(), plain.state());
    ensure(same(s.generator.params(), p.generator.params()), || "generator parameters differ".into())?;
    ensure(same(s.discriminator.params(), p.discriminator.params()), || "discriminator parameters differ".into())?;
    ensure(same(&s.projection, &p.projection), || "projection heads differ".into())
}

/// Forced one-hot coefficients at every index in both interpolation spaces.
pub fn one_hot_degeneracy(model: ModelConfig, train: TrainConfig) -> Check {
    let n = train.mixup_n;
    let data = make_synthetic_fewshot(2, 10, model.resolution).unwrap();
    for space in [LatentSpace::Mapped, LatentSpace::Prior] {
        let cfg = TrainConfig {
            interpolation_space: space,
            ..train.clone()
        };
        let mut t = Trainer::new(cfg, model.clone(), data.clone()).map_err(|e| e.to_string())?;
        for hot in [0, n / 2, n - 1] {
            let out = t
                .mixup_step_with(Some(MixupCoefficients::one_hot(n, hot).unwrap()))
                .map_err(|e| e.to_string())?;
            let anchor = out.anchor.ok_or("no anchor image")?;
            ensure(out.batch.len() == n, || format!("batch of {}", out.batch.len()))?;
            ensure(
                anchor.data().iter().zip(out.batch[hot].data()).all(|(a, b)| bits_equal(*a, *b)),
                || format!("{space:?} one-hot {hot}: anchor differs from batch image"),
            )?;
        }
    }
    let e = std::f64::consts::E;
    for hot in [0, n / 2, n - 1] {
        let t = target_distribution(&MixupCoefficients::one_hot(n, hot).unwrap());
        for (i, p) in t.probs().iter().enumerate() {
            let want = if i == hot { e / (e + (n - 1) as f64) } else { 1.0 / (e + (n - 1) as f64) };
            close(&format!("one-hot target[{i}]"), *p, want, 1e-6)?;
        }
    }
    Ok(())
}

fn run_cli(bin: &Path, args: &[&str], out_env: Option<&Path>) -> std::result::Result<std::process::Output, String> {
    let mut cmd = Command::new(bin);
    cmd.args(args).env_remove("MIXDL_OUT");
    if let Some(p) = out_env {
        cmd.env("MIXDL_OUT", p);
    }
    let out = cmd.output().map_err(|e| format!("cannot run {}: {e}", bin.display()))?;
    if !out.status.success() {
        return Err(format!(
            "`mixdl {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

/// train → eval → sample → interp-grid on `config_text`, in `dir`.
pub fn cli_pipeline(bin: &Path, config_text: &str, dir: &Path) -> Check {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config_text).map_err(|e| e.to_string())?;
    let run = dir.join("run");
    run_cli(bin, &["train", "--config", cfg.to_str().unwrap()], Some(&run))?;

    for entry in ["ckpt", "trace.jsonl", "snapshots", "reports"] {
        ensure(run.join(entry).exists(), || format!("missing {entry} in run directory"))?;
    }
    let steps = mixdl::config::RunConfig::from_toml_str(config_text)
        .map_err(|e| e.to_string())?
        .train
        .steps;
    let trace = mixdl::train::LossTrace::read(&run.join("trace.jsonl")).map_err(|e| e.to_string())?;
    ensure(trace.len() as u64 == steps, || format!("trace has {} records, want {steps}", trace.len()))?;
    let ckpt = run.join("ckpt").join(format!("step_{steps:06}.mixdl"));
    ensure(ckpt.exists(), || format!("missing final checkpoint {}", ckpt.display()))?;
    let ck = ckpt.to_str().unwrap();

    let report = dir.join("report.json");
    run_cli(
        bin,
        &["eval", "--checkpoint", ck, "--metrics", "ppl,diversity", "--samples", "64", "--ppl-paths", "32", "--output", report.to_str().unwrap()],
        None,
    )?;
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    for key in ["ppl", "diversity"] {
        let v = json["metrics"][key].as_f64();
        ensure(v.is_some_and(f64::is_finite), || format!("report lacks finite {key}: {json}"))?;
    }

    let (s1, s2) = (dir.join("s1.png"), dir.join("s2.png"));
    for p in [&s1, &s2] {
        run_cli(bin, &["sample", "--checkpoint", ck, "--seed", "5", "--output", p.to_str().unwrap()], None)?;
    }
    let (b1, b2) = (std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());
    ensure(!b1.is_empty() && b1 == b2, || "sample --seed 5 is not reproducible".into())?;

    let strips = dir.join("interp");
    run_cli(
        bin,
        &["interp-grid", "--checkpoint", ck, "--pairs", "2", "--steps", "10", "--output", strips.to_str().unwrap()],
        None,
    )?;
    let res = mixdl::config::RunConfig::from_toml_str(config_text).unwrap().model.resolution as u32;
    for i in 0..2 {
        let p = strips.join(format!("pair_{i:02}.png"));
        let img = image::open(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        // 10 subintervals means 11 frames in one row, with 1-pixel gutters
        ensure(
            img.width() == 11 * (res + 1) + 1 && img.height() == res + 2,
            || format!("strip {i} is {}x{}", img.width(), img.height()),
        )?;
    }
    Ok(())
}
