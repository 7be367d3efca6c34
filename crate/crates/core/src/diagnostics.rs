//! Finite-difference checks of every differentiable block at tiny sizes.

use ndarray::{Array1, Array2};
use rand::Rng as _;

use crate::error::Result;
use crate::nn::{
    grad_check, softmax_ce, AttentivePooling, Blstm, GradCheckConfig, GradCheckReport, Gradients, Linear, Lstm,
    Mode, ParamSet,
};
use crate::pvad::{ModelConfig, PvadModel};
use crate::rng;
use crate::speaker::SpeakerEncoder;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, "gc-data", 0);
    Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-1.0..1.0))
}

/// Runs every block check; inputs are registered as parameters where the
/// block also returns an input gradient.
pub fn grad_check_suite(seed: u64, cfg: GradCheckConfig) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut r = rng::stream(seed, "gc-init", 0);

    let lin = Linear::new("lin", 4, 3);
    let mut p = ParamSet::new();
    lin.init(&mut p, &mut r);
    p.insert("x", (random_matrix(5, 4, seed) * 3.0).into_dyn(), true);
    let w = random_matrix(5, 3, seed + 1);
    out.push((
        "linear",
        grad_check(
            &p,
            |p| {
                let x = p.matrix("x", 5, 4)?.to_owned();
                let y = lin.forward(p, x.view())?;
                let mut g = Gradients::zeros_like(p);
                let dx = lin.backward(p, x.view(), w.view(), &mut g)?;
                g.get_mut("x")?.assign(&dx.into_dyn());
                Ok(((&y * &w).sum(), g))
            },
            cfg,
        )?,
    ));

    let mut p = ParamSet::new();
    p.insert("logits", (random_matrix(6, 2, seed + 2) * 4.0).into_dyn(), true);
    let labels = [0, 1, 1, 0, 1, 0];
    out.push((
        "softmax-ce",
        grad_check(
            &p,
            |p| {
                let ce = softmax_ce(p.matrix("logits", 6, 2)?, &labels)?;
                let mut g = Gradients::zeros_like(p);
                g.get_mut("logits")?.assign(&ce.grad.into_dyn());
                Ok((ce.loss, g))
            },
            cfg,
        )?,
    ));

    let lstm = Lstm::with_static_input("lstm", 3, 2, 4);
    let mut p = ParamSet::new();
    lstm.init(&mut p, &mut r);
    p.insert("x", random_matrix(6, 3, seed + 3).into_dyn(), true);
    let e = Array1::from_vec(vec![0.4, -0.9]);
    let w = random_matrix(6, 4, seed + 4);
    out.push((
        "lstm",
        grad_check(
            &p,
            |p| {
                let x = p.matrix("x", 6, 3)?.to_owned();
                let c = lstm.forward(p, x.view(), Some(e.view()))?;
                let loss = (&c.output() * &w).sum();
                let mut g = Gradients::zeros_like(p);
                let dx = lstm.backward(p, &c, w.view(), &mut g)?;
                g.get_mut("x")?.assign(&dx.into_dyn());
                Ok((loss, g))
            },
            cfg,
        )?,
    ));

    let bl = Blstm::new("blstm", 3, 2);
    let pool = AttentivePooling::new("att", 4, 2);
    let mut p = ParamSet::new();
    bl.init(&mut p, &mut r);
    pool.init(&mut p, &mut r);
    p.insert("x", random_matrix(5, 3, seed + 5).into_dyn(), true);
    let v = Array1::from_vec(vec![0.3, -1.1, 0.8, 0.5]);
    let w = random_matrix(5, 4, seed + 6);
    out.push((
        "blstm",
        grad_check(
            &p,
            |p| {
                let x = p.matrix("x", 5, 3)?.to_owned();
                let c = bl.forward(p, x.view())?;
                let loss = (&c.output() * &w).sum();
                let mut g = Gradients::zeros_like(p);
                let dx = bl.backward(p, &c, w.view(), &mut g)?;
                g.get_mut("x")?.assign(&dx.into_dyn());
                Ok((loss, g))
            },
            cfg,
        )?,
    ));
    out.push((
        "attentive-pooling",
        grad_check(
            &p,
            |p| {
                let h = p.matrix("x", 5, 3)?.to_owned();
                let c = bl.forward(p, h.view())?;
                let pc = pool.forward(p, c.output())?;
                let mut g = Gradients::zeros_like(p);
                let dh = pool.backward(p, &pc, v.view(), &mut g)?;
                let dx = bl.backward(p, &c, dh.view(), &mut g)?;
                g.get_mut("x")?.assign(&dx.into_dyn());
                Ok((pc.pooled.dot(&v), g))
            },
            cfg,
        )?,
    ));

    let enc = SpeakerEncoder::new(3, 2, 2);
    let mut p = ParamSet::new();
    enc.init(&mut p, &mut r);
    let x = random_matrix(5, 3, seed + 7);
    enc.fit_normalization(&mut p, [x.view()])?;
    let target = Array1::from_vec(vec![0.3, -0.2, 0.1, 0.5]);
    out.push((
        "speaker-encoder",
        grad_check(
            &p,
            |p| {
                let cache = enc.forward(p, x.view())?;
                let diff = &cache.embedding() - &target;
                let mut g = Gradients::zeros_like(p);
                enc.backward(p, &cache, diff.view(), &mut g)?;
                Ok((0.5 * diff.dot(&diff), g))
            },
            cfg,
        )?,
    ));

    for (name, embed) in [("pvad-stack", 2), ("vad-stack", 0)] {
        let m = PvadModel::new(4, embed, ModelConfig { hidden: 3, layers: 2, dropout: 0.5 });
        let mut p = ParamSet::new();
        m.init(&mut p, &mut r);
        let x = random_matrix(6, 4, seed + 8);
        m.fit_normalization(&mut p, [x.view()])?;
        let e = (embed > 0).then(|| Array1::from_shape_fn(embed, |i| 0.3 - 0.2 * i as f64));
        let labels = [0u8, 1, 1, 0, 1, 0];
        out.push((
            name,
            grad_check(
                &p,
                |q| {
                    let mut g = Gradients::zeros_like(q);
                    // fixed dropout mask keeps the closure deterministic
                    let mut dr = rng::stream(seed, "gc-dropout", 0);
                    let loss = m.accumulate_loss(
                        q,
                        x.view(),
                        e.as_ref().map(|e| e.view()),
                        &labels,
                        1.0 / 6.0,
                        Mode::Train,
                        &mut dr,
                        Some(&mut g),
                    )?;
                    Ok((loss, g))
                },
                cfg,
            )?,
        ));
    }
    Ok(out)
}
