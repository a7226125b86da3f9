//! Property checks shared by the unit-style tests and the acceptance run.
//! Each returns a short detail string on success and the reason on failure.

use candle_core::{DType, Tensor, Var};
use pathcast::codec::{vq_loss, Codec, Reduction};
use pathcast::gradcheck::{all_zero, analytic};
use pathcast::mapper::{mapping_loss, AlphaMode, Mapper, MapperConfig};
use pathcast_core::freq::{encode_value, normalize_frequency};
use pathcast_core::propagation::{free_space_pathloss_db, render_pathloss_map};
use pathcast_core::quantize::{lookup, nearest_codeword};
use pathcast_core::{Building, CaptureConfig, Scenario, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{codec_gradient_error, mapper_gradient_error, oracle, toy_codec_config, toy_images, toy_mapper_config};

pub type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

pub fn random_scene(rng: &mut ChaCha8Rng) -> (SceneSpec, CaptureConfig) {
    let extent = 300.0;
    let mut scene = SceneSpec::empty(extent, Scenario::Crossroad);
    for _ in 0..rng.random_range(0..=5) {
        let x = rng.random_range(20.0..240.0);
        let y = rng.random_range(20.0..240.0);
        scene.buildings.push(Building {
            x_min: x,
            y_min: y,
            x_max: x + rng.random_range(5.0..50.0),
            y_max: y + rng.random_range(5.0..50.0),
            height: rng.random_range(8.0..40.0),
            albedo_rgb: [0.5; 3],
        });
    }
    let grid_n = rng.random_range(1..=16);
    let cfg = CaptureConfig::new(
        rng.random_range(80.0..220.0),
        rng.random_range(80.0..220.0),
        rng.random_range(30.0..130.0),
        rng.random_range(1e9..100e9),
        grid_n,
        2 * grid_n,
    )
    .unwrap();
    (scene, cfg)
}

/// Criterion 1: library renderer against the brute-force oracle.
pub fn renderer_matches_oracle(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut blocked_cells = 0;
    for _ in 0..instances {
        let (scene, cfg) = random_scene(&mut rng);
        let got = render_pathloss_map(&scene, &cfg).map_err(e)?;
        let want = oracle::render(&scene, &cfg);
        ensure(got.len() == want.len(), || "map sizes differ".into())?;
        let los = oracle::render(&SceneSpec::empty(scene.extent_m, scene.scenario), &cfg);
        blocked_cells += want.iter().zip(&los).filter(|(a, b)| a > b).count();
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e} dB"))?;
    ensure(blocked_cells > 0, || "no instance had an obstructed cell".into())?;
    Ok(format!("{instances} instances, max |Δ| {worst:.1e} dB, {blocked_cells} obstructed cells"))
}

/// Criterion 2.
pub fn closed_form_spot_checks() -> Check {
    let hi = free_space_pathloss_db(100.0, 28e9).map_err(e)?;
    let lo = free_space_pathloss_db(100.0, 1.6e9).map_err(e)?;
    ensure((hi - 101.39).abs() <= 0.01, || format!("FSPL(100 m, 28 GHz) = {hi}"))?;
    ensure((hi - lo - 24.861).abs() <= 0.005, || format!("band gap {}", hi - lo))?;
    Ok(format!("FSPL {hi:.3} dB, gap {:.4} dB", hi - lo))
}

fn brute_nearest(codebook: &[f64], dim: usize, z: &[f64]) -> usize {
    let dists: Vec<f64> = codebook
        .chunks(dim)
        .map(|c| c.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

/// Criterion 3: exactness, idempotence, tie-breaks and the gradient paths.
pub fn quantizer_suite(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let dim = rng.random_range(1..=8);
        let k = rng.random_range(1..=32);
        let cb: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let got = nearest_codeword(&cb, dim, &z).map_err(e)?;
        ensure(got == brute_nearest(&cb, dim, &z), || format!("case {case}: index {got} is not nearest"))?;
        let back = lookup(&cb, dim, &[got]).map_err(e)?;
        let again = nearest_codeword(&cb, dim, &back).map_err(e)?;
        ensure(again == got, || format!("case {case}: re-quantizing moved {got} to {again}"))?;
    }

    // ties: duplicated codewords and an equidistant point
    let cb = [0.5, 0.5, -1.0, 0.0, 0.5, 0.5, 1.0, 0.0];
    ensure(nearest_codeword(&cb, 2, &[0.5, 0.5]).map_err(e)? == 0, || "duplicate codeword tie".into())?;
    ensure(nearest_codeword(&cb, 2, &[0.0, 0.0]).map_err(e)? == 0, || "equidistant tie".into())?;
    ensure(nearest_codeword(&cb[2..], 2, &[0.0, -0.5]).map_err(e)? == 0, || "offset tie".into())?;

    // the tensor path agrees with the oracle on a real codebook
    let codec = Codec::new(toy_codec_config(), seed, DType::F64).map_err(e)?;
    let nz = codec.config.n_z;
    let hw = codec.config.latent_hw();
    let values: Vec<f64> = (0..4 * nz * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = Tensor::from_vec(values, (4, nz, hw, hw), codec.store.device()).map_err(e)?;
    let (zq, idx) = codec.quantize(&z).map_err(e)?;
    let cbv = codec.codebook_values().map_err(e)?;
    let rows = z.permute((0, 2, 3, 1)).and_then(|t| t.flatten_all()).and_then(|t| t.to_vec1::<f64>()).map_err(e)?;
    for (r, &i) in rows.chunks(nz).zip(&idx) {
        ensure(brute_nearest(&cbv, nz, r) == i, || "codec quantizer disagrees with exhaustive search".into())?;
    }
    let (_, idx2) = codec.quantize(&zq).map_err(e)?;
    ensure(idx2 == idx, || "codec quantizer is not idempotent".into())?;

    straight_through_exact(seed)?;
    stop_gradient_exact(seed)?;
    Ok(format!("{cases} random cases, ties, idempotence, straight-through and stop-gradient"))
}

/// The straight-through gradient w.r.t. z equals the decoder gradient at z_q.
pub fn straight_through_exact(seed: u64) -> std::result::Result<(), String> {
    type Grads = Vec<Vec<f64>>;
    let run = || -> pathcast::Result<(Grads, Grads)> {
        let codec = Codec::new(toy_codec_config(), seed, DType::F64)?;
        let imgs = toy_images(2, 4, 1, seed as usize);
        let refs: Vec<&[u8]> = imgs.iter().map(|v| v.as_slice()).collect();
        let x = codec.images_to_tensor(&refs)?;
        let z = Var::from_tensor(&codec.encode(&x)?.detach())?;
        let (zq, _) = codec.quantize(z.as_tensor())?;
        let st = (z.as_tensor() + (&zq - z.as_tensor())?.detach())?;
        let loss = (&x - codec.decode(&st)?)?.sqr()?.sum_all()?;
        let g_st = analytic(&loss.backward()?, std::slice::from_ref(&z))?;
        let bypass = Var::from_tensor(&zq.detach())?;
        let loss = (&x - codec.decode(bypass.as_tensor())?)?.sqr()?.sum_all()?;
        let g_q = analytic(&loss.backward()?, &[bypass])?;
        Ok((g_st, g_q))
    };
    let (a, b) = run().map_err(e)?;
    // z + (zq - z) equals zq only up to rounding, so exact equality is too strict
    let scale = b.iter().flatten().fold(0f64, |m, v| m.max(v.abs()));
    let dev = a.iter().flatten().zip(b.iter().flatten()).fold(0f64, |m, (x, y)| m.max((x - y).abs()));
    ensure(dev <= 1e-12 * scale.max(1.0), || format!("straight-through gradient differs from the decoder gradient by {dev:e}"))?;
    ensure(!all_zero(&a), || "straight-through gradient vanished".into())
}

/// Codebook term reaches only the codebook, commitment term only the encoder.
pub fn stop_gradient_exact(seed: u64) -> std::result::Result<(), String> {
    let run = || -> pathcast::Result<[bool; 4]> {
        let codec = Codec::new(toy_codec_config(), seed, DType::F64)?;
        let imgs = toy_images(3, 4, 1, seed as usize + 1);
        let refs: Vec<&[u8]> = imgs.iter().map(|v| v.as_slice()).collect();
        let x = codec.images_to_tensor(&refs)?;
        let pass = codec.pass(&x)?;
        let l = vq_loss(&x, &pass.x_hat, &pass.z, &pass.z_q, 0.25, Reduction::Sum)?;
        let enc = codec.store.vars_with_prefix("enc.");
        let cb = vec![codec.store.find("codebook").expect("codebook").clone()];
        let g = l.codebook.backward()?;
        let (a, b) = (all_zero(&analytic(&g, &enc)?), all_zero(&analytic(&g, &cb)?));
        let g = l.commit.backward()?;
        Ok([a, !b, all_zero(&analytic(&g, &cb)?), !all_zero(&analytic(&g, &enc)?)])
    };
    let r = run().map_err(e)?;
    ensure(r.iter().all(|v| *v), || format!("stop-gradient pattern {r:?}"))
}

/// Two blocks under 500 parameters.
pub fn tiny_mapper_config() -> MapperConfig {
    MapperConfig {
        n_blocks: 2,
        n_heads: 2,
        d_model: 4,
        n_routed: 3,
        d_ff: 2,
        freq_dim: 2,
        sensory_vocab: 5,
        channel_vocab: 4,
        tokens: 3,
        alpha_s_mode: AlphaMode::LearnedScalar,
        ..MapperConfig::default()
    }
}

/// Criterion 4.
pub fn gradient_oracles(seed: u64) -> Check {
    let (codec_err, codec_n) = codec_gradient_error(seed).map_err(e)?;
    ensure(codec_n <= 500, || format!("codec toy has {codec_n} parameters"))?;
    ensure(codec_err < 1e-5, || format!("codec relative error {codec_err:e}"))?;
    let (tiny_err, tiny_n) = super::mapper_gradient_error_with(tiny_mapper_config(), seed).map_err(e)?;
    ensure(tiny_n <= 500, || format!("mapper toy has {tiny_n} parameters"))?;
    ensure(tiny_err < 1e-4, || format!("mapper relative error {tiny_err:e}"))?;
    let (d16_err, d16_n) = mapper_gradient_error(seed).map_err(e)?;
    ensure(d16_err < 1e-4, || format!("d_model 16 mapper relative error {d16_err:e}"))?;
    Ok(format!(
        "codec {codec_err:.1e} ({codec_n} params), mapper {tiny_err:.1e} ({tiny_n} params), d16 mapper {d16_err:.1e} ({d16_n} params)"
    ))
}

fn routing_batch(m: &Mapper, rng: &mut ChaCha8Rng, freqs: &[f64]) -> pathcast::Result<(Tensor, Vec<pathcast_core::FrequencyCondition>, Tensor)> {
    let cfg = &m.config;
    let b = freqs.len();
    let toks: Vec<u32> = (0..b * cfg.tokens).map(|_| rng.random_range(0..cfg.sensory_vocab as u32)).collect();
    let tgts: Vec<u32> = (0..b * cfg.tokens).map(|_| rng.random_range(0..cfg.channel_vocab as u32)).collect();
    let dev = m.store.device();
    let conds = freqs.iter().map(|&f| m.condition(f, false)).collect::<pathcast::Result<Vec<_>>>()?;
    Ok((
        Tensor::from_vec(toks, (b, cfg.tokens), dev)?,
        conds,
        Tensor::from_vec(tgts, (b, cfg.tokens), dev)?,
    ))
}

/// Copy of `m` with routed experts relabelled: new expert `j` is old `perm[j]`.
fn permuted(m: &Mapper, perm: &[usize]) -> pathcast::Result<Mapper> {
    let mut snap = m.store.snapshot()?;
    let lookup: Vec<(String, Tensor)> = snap.clone();
    let find = |n: &str| lookup.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone()).expect("parameter");
    let dev = m.store.device();
    let rows = Tensor::from_vec(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), perm.len(), dev)?;
    for (name, t) in snap.iter_mut() {
        if let Some((block, rest)) = name.split_once(".moe.routed") {
            let (j, tail) = rest.split_once('.').expect("expert parameter");
            let j: usize = j.parse().expect("expert index");
            *t = find(&format!("{block}.moe.routed{}.{tail}", perm[j]));
        } else if name.ends_with(".moe.gate.weight") || name.ends_with(".moe.gate.bias") {
            *t = t.index_select(&rows, 0)?;
        }
    }
    let mut out = Mapper::new(m.config.clone(), 0, m.dtype())?;
    out.store.load(&snap)?;
    Ok(out)
}

/// Criterion 5.
pub fn routing_contract(seeds: u64) -> Check {
    let mut max_dev = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mapper::new(toy_mapper_config(), seed, DType::F64).map_err(e)?;
        let n_r = m.config.n_routed;
        let (tokens, conds, _) = routing_batch(&m, &mut rng, &[1.6e9, 15e9, 28e9, 15e9]).map_err(e)?;
        let out = m.forward(&tokens, &conds).map_err(e)?;
        for d in out.routing.iter().flatten() {
            let active = (0..n_r).filter(|&j| d.weight_of(j) > 0.0).count();
            ensure(active == 2 && d.selected[0] != d.selected[1], || format!("seed {seed}: {active} active experts"))?;
            let sum: f64 = (0..n_r).map(|j| d.weight_of(j)).sum();
            ensure((sum - 1.0).abs() <= 1e-6, || format!("seed {seed}: weights sum to {sum}"))?;
        }

        // single-band batch: experts outside the chosen pair receive exactly zero gradient
        let f = [1.6e9, 15e9, 28e9][seed as usize % 3];
        let (tokens1, conds1, targets1) = routing_batch(&m, &mut rng, &[f, f]).map_err(e)?;
        let out1 = m.forward(&tokens1, &conds1).map_err(e)?;
        let grads = mapping_loss(&out1.logits, &targets1).and_then(|l| Ok(l.backward()?)).map_err(e)?;
        for (block, decisions) in out1.routing.iter().enumerate() {
            let chosen = decisions[0].selected;
            for j in 0..n_r {
                let vars = m.store.vars_with_prefix(&format!("block{block}.moe.routed{j}."));
                let zero = all_zero(&analytic(&grads, &vars).map_err(e)?);
                ensure(zero != chosen.contains(&j), || {
                    format!("seed {seed} block {block}: expert {j} selected={} zero-grad={zero}", chosen.contains(&j))
                })?;
            }
        }

        // relabelling the experts leaves the function unchanged
        let mut perm: Vec<usize> = (0..n_r).collect();
        perm.rotate_left(1 + seed as usize % (n_r - 1));
        let p = permuted(&m, &perm).map_err(e)?;
        let out_p = p.forward(&tokens, &conds).map_err(e)?;
        let diff = (&out.logits - &out_p.logits)
            .and_then(|t| t.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>())
            .map_err(e)?;
        max_dev = max_dev.max(diff);
        ensure(diff <= 1e-12, || format!("seed {seed}: permuted logits differ by {diff:e}"))?;
        for (a, b) in out.routing.iter().flatten().zip(out_p.routing.iter().flatten()) {
            let mapped = [perm[b.selected[0]], perm[b.selected[1]]];
            ensure(mapped == a.selected, || format!("seed {seed}: routing not equivariant"))?;
        }
    }
    Ok(format!("{seeds} seeds, max permuted logit deviation {max_dev:.1e}"))
}

/// Criterion 6.
pub fn frequency_embedding() -> Check {
    let got = encode_value(0.25, 8).map_err(e)?;
    let want = [1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 1.0, 1.0];
    let dev = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(dev <= 1e-12, || format!("encoding deviates by {dev:e}"))?;
    let enc: Vec<Vec<f64>> = [1.6e9, 15e9, 28e9]
        .iter()
        .map(|&f| encode_value(normalize_frequency(f), MapperConfig::default().freq_dim))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    let mut min_sep = f64::INFINITY;
    for i in 0..3 {
        for j in i + 1..3 {
            let d: f64 = enc[i].iter().zip(&enc[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            min_sep = min_sep.min(d);
        }
    }
    ensure(min_sep > 0.1, || format!("closest bands only {min_sep} apart"))?;
    Ok(format!("max deviation {dev:.1e}, min band separation {min_sep:.3}"))
}
