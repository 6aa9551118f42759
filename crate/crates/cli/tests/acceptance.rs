//! Acceptance suite. Criteria run one after another so that the runtime
//! budgets are measured without competing test threads; each prints a single
//! PASS/FAIL line on stderr.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qsm_core::dipole::{build_dipole_kernel, forward_field, simulate_measurement};
use qsm_core::fft::Fft3;
use qsm_core::fieldprep::{resharp, ResharpConfig};
use qsm_core::inversion::{invert_medi_like, invert_tkd, invert_tv_admm, MediConfig, TkdConfig, TvAdmmConfig};
use qsm_core::metrics::{evaluate, format_table, hfen_percent, rmse_percent, ssim, MetricSummary};
use qsm_core::phantom::{derive_seed, generate_phantom, PhantomSpec, Shape};
use qsm_core::{B0Direction, Mask, Unit, Volume};
use qsm_nn::gradcheck::{check_gradients, linear_readout, GradCheck};
use qsm_nn::net::{census, layer_plan, Census};
use qsm_nn::optim::rmsprop_step;
use qsm_nn::params::{Init, ParamSpec};
use qsm_nn::train::samples_from_pairs;
use qsm_nn::{infer, Graph, Net, NetConfig, ParamStore, RmsPropConfig, Tensor, TrainConfig, Trainer};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(start: Instant, secs: f64) -> Result<f64, String> {
    let t = start.elapsed().as_secs_f64();
    ensure(t < secs, format!("took {t:.1} s, budget {secs} s"))?;
    Ok(t)
}

fn rand_vec(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()
}

fn rand_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    Tensor::new(shape.to_vec(), rand_vec(shape.iter().product(), scale, seed)).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn ball(d: [usize; 3], c: [f64; 3], r: f64) -> Mask {
    Mask::from_fn(d, [1.0; 3], |x, y, z| {
        (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2) <= r * r
    })
    .unwrap()
}

fn rms_in(v: &[f64], m: &Mask) -> f64 {
    (m.indices().map(|i| v[i] * v[i]).sum::<f64>() / m.count() as f64).sqrt()
}

fn kernel_analytics() -> Outcome {
    let t0 = Instant::now();
    let n = 64;
    let k = build_dipole_kernel([n; 3], [1.0; 3], B0Direction::Z).unwrap();
    let mut worst = 0.0f64;
    for i in 1..n {
        worst = worst.max((k.at(0, 0, i) + 2.0 / 3.0).abs());
        worst = worst.max((k.at(i, 0, 0) - 1.0 / 3.0).abs());
        worst = worst.max((k.at(i, n - i, 0) - 1.0 / 3.0).abs());
    }
    ensure(worst < 1e-12, format!("axis/equator error {worst:e}"))?;
    ensure(k.at(0, 0, 0) == 0.0, "DC not zero")?;
    let (lo, hi) = k.values().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    ensure(lo >= -2.0 / 3.0 - 1e-12 && hi <= 1.0 / 3.0 + 1e-12, format!("range [{lo}, {hi}]"))?;
    let t = within_budget(t0, 1.0)?;
    Ok(format!("max error {worst:.1e}, range [{lo:.4}, {hi:.4}], {t:.2} s"))
}

fn sphere_oracle() -> Outcome {
    let t0 = Instant::now();
    let (n, a) = (96usize, 8.0);
    let c = [n as f64 / 2.0; 3];
    let mut chi = Volume::zeros([n; 3], [1.0; 3], Unit::Ppm).unwrap();
    Shape::sphere(c, a, 1.0).rasterize(&mut chi);
    let k = build_dipole_kernel([n; 3], [1.0; 3], B0Direction::Z).unwrap();
    let field = forward_field(&chi, &k, true).unwrap();
    let (mut num, mut den, mut interior) = (0.0, 0.0, 0.0f64);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                let f = field.get(x, y, z);
                // the voxelized surface is excluded on both sides
                if r < a - 2.0 {
                    interior = interior.max(f.abs());
                } else if r > 1.5 * a && r <= 4.0 * a {
                    let cos2 = p[2] * p[2] / (r * r);
                    let analytic = a.powi(3) / 3.0 * (3.0 * cos2 - 1.0) / r.powi(3);
                    num += (f - analytic).powi(2);
                    den += analytic * analytic;
                }
            }
        }
    }
    let rel = (num / den).sqrt();
    ensure(rel < 0.05, format!("exterior relative error {rel:.4}"))?;
    ensure(interior < 0.02, format!("interior |field| {interior:.4} ppm"))?;
    let t = within_budget(t0, 10.0)?;
    Ok(format!("exterior relative error {:.2}%, interior max {interior:.4} ppm, {t:.1} s", 100.0 * rel))
}

fn convolution_equivalence() -> Outcome {
    let t0 = Instant::now();
    let n = 8usize;
    let d = [n; 3];
    let k = build_dipole_kernel(d, [1.0; 3], B0Direction::from_angles(0.4, 0.9)).unwrap();
    let at = |x: usize, y: usize, z: usize| x + n * (y + n * z);
    // spatial kernel by a direct inverse DFT of the (real, even) spectrum
    let mut h = vec![0.0; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for kz in 0..n {
                    for ky in 0..n {
                        for kx in 0..n {
                            let ph = std::f64::consts::TAU * ((kx * x + ky * y + kz * z) as f64) / n as f64;
                            acc += k.at(kx, ky, kz) * ph.cos();
                        }
                    }
                }
                h[at(x, y, z)] = acc / (n * n * n) as f64;
            }
        }
    }
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let chi = Volume::new(d, [1.0; 3], Unit::Ppm, rand_vec(n * n * n, 1.0, seed)).unwrap();
        let fft = forward_field(&chi, &k, false).unwrap();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for sz in 0..n {
                        for sy in 0..n {
                            for sx in 0..n {
                                acc +=
                                    chi.get(sx, sy, sz) * h[at((x + n - sx) % n, (y + n - sy) % n, (z + n - sz) % n)];
                            }
                        }
                    }
                    worst = worst.max((acc - fft.get(x, y, z)).abs());
                }
            }
        }
    }
    ensure(worst < 1e-8, format!("max difference {worst:e}"))?;
    let t = within_budget(t0, 5.0)?;
    Ok(format!("max difference {worst:.1e} over 3 volumes, {t:.2} s"))
}

fn tkd_exactness() -> Outcome {
    let t0 = Instant::now();
    let d = [32, 28, 24];
    let n: usize = d.iter().product();
    let k = build_dipole_kernel(d, [1.0; 3], B0Direction::Z).unwrap();
    let cfg = TkdConfig::default();
    let keep: Vec<f64> = k.values().iter().map(|v| if v.abs() > cfg.threshold { 1.0 } else { 0.0 }).collect();
    let plan = Fft3::new(d).unwrap();
    let chi = plan.filter_real(&rand_vec(n, 1.0, 42), &keep);
    let chi = Volume::new(d, [1.0; 3], Unit::Ppm, chi).unwrap();
    let field = forward_field(&chi, &k, false).unwrap();
    let back = invert_tkd(&field, &k, &cfg, &Mask::full(d, [1.0; 3]).unwrap()).unwrap();
    let rmse = (back.data().iter().zip(chi.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sqrt();
    ensure(rmse < 1e-8, format!("roundtrip RMSE {rmse:e}"))?;
    let t = within_budget(t0, 5.0)?;
    Ok(format!("roundtrip RMSE {rmse:.1e}, {t:.2} s"))
}

fn solver_ordering() -> Outcome {
    let t0 = Instant::now();
    let specs = PhantomSpec::new([64; 3], 0).batch(2024, 10);
    let (mut tkd, mut tv, mut medi) = (Vec::new(), Vec::new(), Vec::new());
    for (i, spec) in specs.iter().enumerate() {
        let p = generate_phantom(spec).unwrap();
        let k = build_dipole_kernel(spec.dims, spec.voxel_size_mm, p.b0).unwrap();
        let f = simulate_measurement(&p.local_field, &p.mask, 20.0, derive_seed(77, i as u64)).unwrap();
        let score = |chi: &Volume| evaluate(&chi.masked(&p.mask).unwrap(), &p.chi_true, &p.mask).unwrap();
        tkd.push(score(&invert_tkd(&f, &k, &TkdConfig::default(), &p.mask).unwrap()));
        tv.push(score(&invert_tv_admm(&f, &k, p.mask.as_volume(), &TvAdmmConfig::default()).unwrap().chi));
        medi.push(score(&invert_medi_like(&f, &k, &p.chi_true, &p.mask, &MediConfig::default()).unwrap().chi));
    }
    let rows = [("TKD", &tkd), ("TV-ADMM", &tv), ("MEDI-like", &medi)].map(|(l, r)| MetricSummary::from_reports(l, r));
    let table = format_table(&rows);
    let mean = |i: usize| rows[i].rmse_mean;
    let _ = writeln!(std::io::stderr(), "{table}");
    ensure(mean(1) < mean(0), format!("TV {:.2} not below TKD {:.2}", mean(1), mean(0)))?;
    ensure(mean(2) <= mean(1) + 1.0, format!("MEDI {:.2} above TV {:.2} + 1", mean(2), mean(1)))?;
    let t = within_budget(t0, 600.0)?;
    Ok(format!("RMSE TKD {:.2}, TV {:.2}, MEDI {:.2} (%), {t:.0} s", mean(0), mean(1), mean(2)))
}

/// Training recipe for the neural ordering criterion.
const NN_EPOCHS: usize = 8;
const NN_LR: f64 = 1e-3;
const NN_FIELD_SCALE: f64 = 10.0;

fn neural_ordering() -> Outcome {
    let base = PhantomSpec::new([32; 3], 0);
    let train: Vec<_> = base.batch(11, 200).iter().map(|s| generate_phantom(s).unwrap()).collect();
    let held: Vec<_> = base.batch(12, 20).iter().map(|s| generate_phantom(s).unwrap()).collect();
    let samples = samples_from_pairs(&train, Some(20.0), 3).unwrap();
    let cfg = TrainConfig {
        net: NetConfig { base_channels: 8, input_shape: [32; 3], field_scale: NN_FIELD_SCALE, ..NetConfig::default() },
        optimizer: RmsPropConfig { lr0: NN_LR, ..RmsPropConfig::default() },
        epochs: NN_EPOCHS,
        batch_size: 2,
        seed: 0,
        checkpoint_every: 0,
    };
    let t0 = Instant::now();
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.run(&samples, None, |_| {}).unwrap();
    let train_s = t0.elapsed().as_secs_f64();
    ensure(train_s <= 1800.0, format!("training took {train_s:.0} s"))?;

    let k = build_dipole_kernel([32; 3], [1.0; 3], B0Direction::Z).unwrap();
    let (mut nn, mut tkd) = (0.0, 0.0);
    for (i, p) in held.iter().enumerate() {
        let f = simulate_measurement(&p.local_field, &p.mask, 20.0, derive_seed(99, i as u64)).unwrap();
        nn +=
            rmse_percent(&infer(&trainer.net, &f, &p.mask).unwrap(), &p.chi_true, &p.mask).unwrap() / held.len() as f64;
        tkd += rmse_percent(&invert_tkd(&f, &k, &TkdConfig::default(), &p.mask).unwrap(), &p.chi_true, &p.mask)
            .unwrap()
            / held.len() as f64;
    }
    ensure(nn < tkd, format!("NN {nn:.2} not below TKD {tkd:.2}"))?;

    // reported only: the in-mask mean is not observable from the field, so the
    // network's answer to a zero field reflects the training prior
    let typical = held.iter().map(|p| rms_in(p.chi_true.data(), &p.mask)).sum::<f64>() / held.len() as f64;
    let p = &held[0];
    let zero = Volume::zeros([32; 3], [1.0; 3], Unit::Ppm).unwrap();
    let out = infer(&trainer.net, &zero, &p.mask).unwrap();
    let ratio = rms_in(out.data(), &p.mask) / typical;
    Ok(format!(
        "held-out RMSE NN {nn:.2} vs TKD {tkd:.2} (%), zero-field output {:.1}% of phantom RMS, training {train_s:.0} s",
        100.0 * ratio
    ))
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let (h, tol) = (1e-5, 1e-4);
    let weights = |shape: &[usize], seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap()
    };
    let mut report = Vec::new();
    let mut record = |name: &str, r: GradCheck, ok: bool| -> Result<(), String> {
        ensure(ok && r.checked > 0, format!("{name}: max rel err {:.2e} at {:?}", r.max_rel_err, r.worst))?;
        report.push(format!("{name} {:.0e}", r.max_rel_err));
        Ok(())
    };

    for dilation in [1, 2] {
        let leaves = vec![
            rand_tensor(&[1, 2, 4, 4, 4], 1.0, 1),
            rand_tensor(&[3, 2, 3, 3, 3], 0.4, 2),
            rand_tensor(&[3], 0.1, 3),
            rand_tensor(&[3, 2, 3, 3, 3], 0.4, 4),
            rand_tensor(&[3], 0.1, 5),
        ];
        let w = weights(&[1, 3, 4, 4, 4], 6);
        let r = check_gradients(&leaves, h, 40, |g, ids| {
            let y = g.gated_conv(ids[0], ids[1], ids[2], ids[3], ids[4], dilation, 0.2)?;
            linear_readout(g, y, &w)
        })
        .unwrap();
        record(&format!("gated-d{dilation}"), r.clone(), r.passes(tol))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut vals: Vec<f64> = (0..128).map(|i| i as f64 * 0.01).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let w = weights(&[1, 2, 2, 2, 2], 8);
    let r = check_gradients(&[Tensor::new(vec![1, 2, 4, 4, 4], vals).unwrap()], h, 128, |g, ids| {
        let y = g.maxpool(ids[0])?;
        linear_readout(g, y, &w)
    })
    .unwrap();
    record("pool", r.clone(), r.passes(tol))?;

    let leaves =
        vec![rand_tensor(&[1, 2, 2, 3, 2], 1.0, 9), rand_tensor(&[2, 3, 3, 3, 3], 0.4, 10), rand_tensor(&[3], 0.1, 11)];
    let w = weights(&[1, 3, 4, 6, 4], 12);
    let r = check_gradients(&leaves, h, 60, |g, ids| {
        let y = g.deconv(ids[0], ids[1], ids[2])?;
        linear_readout(g, y, &w)
    })
    .unwrap();
    record("deconv", r.clone(), r.passes(tol))?;

    let leaves = vec![rand_tensor(&[2, 2, 2, 2, 4], 2.0, 13), rand_tensor(&[2], 1.0, 14), rand_tensor(&[2], 1.0, 15)];
    let w = weights(&[2, 2, 2, 2, 4], 16);
    let r = check_gradients(&leaves, h, 64, |g, ids| {
        let y = g.norm(ids[0], ids[1], ids[2], 1e-5)?;
        linear_readout(g, y, &w)
    })
    .unwrap();
    record("norm", r.clone(), r.passes(tol))?;

    let leaves = vec![
        rand_tensor(&[2, 3, 2, 2, 2], 1.0, 17),
        rand_tensor(&[2, 3], 0.8, 18),
        rand_tensor(&[2, 3], 0.8, 19),
        rand_tensor(&[2, 3], 0.8, 20),
        rand_tensor(&[3, 2], 0.8, 21),
    ];
    let w = weights(&[2, 3, 2, 2, 2], 22);
    let r = check_gradients(&leaves, h, 48, |g, ids| {
        let y = g.nonlocal(ids[0], [ids[1], ids[2], ids[3], ids[4]], 4096)?;
        linear_readout(g, y, &w)
    })
    .unwrap();
    record("nonlocal", r.clone(), r.passes(tol))?;

    let pred = rand_tensor(&[1, 1, 3, 3, 3], 1.0, 23);
    let target = Tensor::new(
        pred.shape().to_vec(),
        pred.data().iter().enumerate().map(|(i, p)| p + if i % 2 == 0 { 0.3 } else { -0.2 }).collect(),
    )
    .unwrap();
    let mask =
        Tensor::new(pred.shape().to_vec(), (0..27).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect()).unwrap();
    let r = check_gradients(&[pred, target], h, 27, |g, ids| {
        let m = g.input(mask.clone());
        g.l1_loss(ids[0], ids[1], m)
    })
    .unwrap();
    record("l1", r.clone(), r.passes(tol))?;

    let mut net = Net::new(NetConfig { base_channels: 1, input_shape: [16; 3], ..NetConfig::default() }, 31).unwrap();
    let wz = net.params.index_of("bottleneck.nonlocal.wz").unwrap();
    *net.params.value_mut(wz) = rand_tensor(net.params.value(wz).shape(), 0.5, 32);
    let mut leaves = vec![rand_tensor(&[1, 2, 16, 16, 16], 1.0, 33)];
    leaves.extend(net.params.values().iter().cloned());
    let w = weights(&[1, 1, 16, 16, 16], 34);
    let r = check_gradients(&leaves, h, 3, |g, ids| {
        let out = net.forward_with(g, ids[0], &ids[1..])?;
        linear_readout(g, out, &w)
    })
    .unwrap();
    // entries below 1e-8 in magnitude are compared absolutely
    record("network (abs floor 1e-8)", r.clone(), r.passes_mixed(tol, 1e-8))?;

    let t = within_budget(t0, 300.0)?;
    Ok(format!("{} ({t:.0} s)", report.join(", ")))
}

fn nonlocal_oracle() -> Outcome {
    let (c, inner, sp) = (4usize, 2usize, [3usize, 2, 2]);
    let n: usize = sp.iter().product();
    let x = rand_tensor(&[2, c, sp[0], sp[1], sp[2]], 1.0, 50);
    let w: Vec<Tensor> = (0..3).map(|i| rand_tensor(&[inner, c], 1.0, 51 + i)).collect();
    let wz = rand_tensor(&[c, inner], 1.0, 54);
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let ids: Vec<_> = w.iter().chain([&wz]).map(|t| g.input(t.clone())).collect();
    let y = g.nonlocal(xi, [ids[0], ids[1], ids[2], ids[3]], 64).unwrap();

    let proj = |m: &Tensor, b: usize, j: usize, r: usize| {
        (0..c).map(|ci| m.data()[r * c + ci] * x.data()[(b * c + ci) * n + j]).sum::<f64>()
    };
    let mut expect = x.data().to_vec();
    for b in 0..2 {
        for i in 0..n {
            let logits: Vec<f64> =
                (0..n).map(|j| (0..inner).map(|r| proj(&w[0], b, i, r) * proj(&w[1], b, j, r)).sum()).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for r in 0..inner {
                let yr: f64 = (0..n).map(|j| logits[j].exp() / z * proj(&w[2], b, j, r)).sum();
                for co in 0..c {
                    expect[(b * c + co) * n + i] += wz.data()[co * inner + r] * yr;
                }
            }
        }
    }
    let err = max_abs_diff(g.value(y).data(), &expect);
    ensure(err < 1e-10, format!("max difference {err:e}"))?;
    Ok(format!("max difference {err:.1e} over {} outputs", expect.len()))
}

fn layer_census() -> Outcome {
    let cfg = NetConfig::full_shape();
    let got = census(&layer_plan(&cfg));
    let want = Census {
        gated_conv_dilation1: 6,
        gated_conv_dilation2: 3,
        max_pools: 4,
        deconvs: 4,
        nonlocal_blocks: 1,
        normalizations: 9,
        concatenations: 5,
        linear_convs: 1,
    };
    ensure(got == want, format!("census {got:?}"))?;
    let net = Net::new(cfg, 0).map_err(|e| e.to_string())?;
    ensure(net.census() == want, "instantiated network census differs")?;
    Ok(format!("{got:?}"))
}

fn resharp_background() -> Outcome {
    let t0 = Instant::now();
    let d = [64; 3];
    let mask = ball(d, [32.0; 3], 26.0);
    let k = build_dipole_kernel(d, [1.0; 3], B0Direction::Z).unwrap();
    let cfg = ResharpConfig::default();
    let source = |c: [f64; 3], r: f64, v: f64| {
        let mut chi = Volume::zeros(d, [1.0; 3], Unit::Ppm).unwrap();
        Shape::sphere(c, r, v).rasterize(&mut chi);
        forward_field(&chi, &k, true).unwrap()
    };
    let ext = source([7.0, 9.0, 58.0], 5.0, 2.0);
    let int = source([30.0, 35.0, 31.0], 4.0, 0.5);
    let only_ext = resharp(&ext, &mask, &cfg).unwrap();
    let rel = only_ext.reliable_mask.clone();

    // independent erosion: every voxel within radius_mm stays inside the mask
    let r = cfg.radius_mm as isize;
    let inside = mask.to_bools();
    let mut expect = vec![false; inside.len()];
    for z in 0..64isize {
        for y in 0..64isize {
            for x in 0..64isize {
                let mut all = true;
                'n: for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dx * dx + dy * dy + dz * dz > r * r {
                                continue;
                            }
                            let (u, v, w) = (x + dx, y + dy, z + dz);
                            if !(0..64).contains(&u)
                                || !(0..64).contains(&v)
                                || !(0..64).contains(&w)
                                || !inside[(u + 64 * (v + 64 * w)) as usize]
                            {
                                all = false;
                                break 'n;
                            }
                        }
                    }
                }
                expect[(x + 64 * (y + 64 * z)) as usize] = all;
            }
        }
    }
    ensure(rel.to_bools() == expect, "reliable mask differs from the 6 mm erosion")?;

    let only_int = resharp(&int, &mask, &cfg).unwrap();
    let kept = rms_in(only_int.local_field.checked_sub(&int).unwrap().data(), &rel) / rms_in(int.data(), &rel);
    let bg = rms_in(only_ext.local_field.data(), &rel) / rms_in(ext.data(), &rel);
    ensure(bg < 0.10, format!("background residual {:.1}%", 100.0 * bg))?;
    ensure(kept < 0.15, format!("internal source error {:.1}%", 100.0 * kept))?;
    let t = within_budget(t0, 60.0)?;
    Ok(format!(
        "background residual {:.1}%, internal error {:.1}%, erosion exact ({} voxels), {t:.1} s",
        100.0 * bg,
        100.0 * kept,
        rel.count()
    ))
}

fn rmsprop_recursion() -> Outcome {
    let cfg = RmsPropConfig { lr0: 1e-2, ..RmsPropConfig::default() };
    let mut store = ParamStore::init(&[ParamSpec { name: "p".into(), shape: vec![3], init: Init::Zeros }], 0);
    let grads: Vec<Vec<f64>> = (0..25).map(|t| rand_vec(3, 1.0 + t as f64, 60 + t)).collect();
    let mut worst = 0.0f64;
    let mut param = [0.0f64; 3];
    for (t, gt) in grads.iter().enumerate() {
        let lr = rmsprop_step(&mut store, &[Tensor::new(vec![3], gt.clone()).unwrap()], &cfg).unwrap();
        ensure(lr == cfg.lr0, "learning rate changed before step 200")?;
        for j in 0..3 {
            // a_t = (1 - rho) sum_s rho^(t - s) g_s^2
            let a: f64 = (0..=t).map(|s| (1.0 - cfg.rho) * cfg.rho.powi((t - s) as i32) * grads[s][j].powi(2)).sum();
            param[j] -= cfg.lr0 * gt[j] / (a + cfg.eps).sqrt();
            worst = worst.max((store.accumulator(0).data()[j] - a).abs());
            worst = worst.max((store.value(0).data()[j] - param[j]).abs());
        }
    }
    ensure(worst < 1e-12, format!("accumulator/parameter error {worst:e}"))?;

    let mut boundaries = Vec::new();
    for step in 1..=1000u64 {
        if cfg.lr_at(step) != cfg.lr_at(step - 1) {
            boundaries.push(step);
        }
    }
    ensure(boundaries == [200, 400, 600, 800, 1000], format!("decay at {boundaries:?}"))?;
    ensure((cfg.lr_at(400) - cfg.lr0 * 0.95 * 0.95).abs() < 1e-18, "decay factor")?;
    store.step = 199;
    let before = rmsprop_step(&mut store, &[Tensor::zeros(vec![3])], &cfg).unwrap();
    let after = rmsprop_step(&mut store, &[Tensor::zeros(vec![3])], &cfg).unwrap();
    ensure(before == cfg.lr0 && after == cfg.lr0 * cfg.gamma, "optimizer did not decay at step 200")?;
    Ok(format!("max error {worst:.1e}, decays at {boundaries:?}"))
}

fn qsmtk(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_qsmtk")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap_or_default())
        })
        .collect();
    v.sort();
    v
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let strict = "--strict-deterministic";
    let run_all = || -> Result<Vec<(String, Vec<u8>)>, String> {
        qsmtk(&[
            "synth",
            strict,
            "--count",
            "4",
            "--size",
            "16",
            "--snr",
            "20",
            "--seed",
            "5",
            "--out",
            &p("run/data"),
        ])?;
        qsmtk(&[
            "train",
            strict,
            "--data",
            &p("run/data"),
            "--epochs",
            "2",
            "--base-channels",
            "2",
            "--snr",
            "20",
            "--out",
            &p("run/net.ckpt"),
        ])?;
        for method in ["tkd", "tv"] {
            qsmtk(&[
                "invert",
                strict,
                "--method",
                method,
                "--field",
                &p("run/data/phantom_0000_noisy.vol"),
                "--mask",
                &p("run/data/phantom_0000_mask.vol"),
                "--out",
                &p(&format!("run/{method}.vol")),
            ])?;
        }
        qsmtk(&[
            "invert",
            strict,
            "--method",
            "nn",
            "--checkpoint",
            &p("run/net.ckpt"),
            "--field",
            &p("run/data/phantom_0001_noisy.vol"),
            "--mask",
            &p("run/data/phantom_0001_mask.vol"),
            "--out",
            &p("run/nn.vol"),
        ])?;
        let mut all = tree_bytes(&root.join("run"));
        all.extend(tree_bytes(&root.join("run/data")));
        Ok(all)
    };
    let first = run_all()?;
    std::fs::remove_dir_all(root.join("run")).map_err(|e| e.to_string())?;
    let second = run_all()?;
    ensure(first.len() > 20 && first == second, "strict reruns differ")?;

    qsmtk(&[
        "train",
        strict,
        "--data",
        &p("run/data"),
        "--epochs",
        "1",
        "--base-channels",
        "2",
        "--snr",
        "20",
        "--out",
        &p("part.ckpt"),
    ])?;
    qsmtk(&[
        "train",
        strict,
        "--data",
        &p("run/data"),
        "--epochs",
        "2",
        "--snr",
        "20",
        "--resume",
        &p("part.ckpt"),
        "--out",
        &p("resumed.ckpt"),
    ])?;
    let full = std::fs::read(root.join("run/net.ckpt")).map_err(|e| e.to_string())?;
    let resumed = std::fs::read(root.join("resumed.ckpt")).map_err(|e| e.to_string())?;
    ensure(full == resumed, "resumed checkpoint differs from uninterrupted training")?;
    Ok(format!("{} files identical across reruns, resume bit-exact", first.len()))
}

fn log_oracle(v: &Volume) -> Vec<f64> {
    let (hw, s2) = (7isize, 1.5f64 * 1.5);
    let mut taps = Vec::new();
    for z in -hw..=hw {
        for y in -hw..=hw {
            for x in -hw..=hw {
                let r2 = (x * x + y * y + z * z) as f64;
                taps.push(([x, y, z], (r2 - 3.0 * s2) / (s2 * s2) * (-r2 / (2.0 * s2)).exp()));
            }
        }
    }
    let mean = taps.iter().map(|t| t.1).sum::<f64>() / taps.len() as f64;
    let d = v.dims().map(|n| n as isize);
    let mut out = vec![0.0; v.len()];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let mut acc = 0.0;
                for (o, w) in &taps {
                    let q = [(x - o[0]).rem_euclid(d[0]), (y - o[1]).rem_euclid(d[1]), (z - o[2]).rem_euclid(d[2])];
                    acc += (w - mean) * v.get(q[0] as usize, q[1] as usize, q[2] as usize);
                }
                out[(x + d[0] * (y + d[1] * z)) as usize] = acc;
            }
        }
    }
    out
}

fn metric_identities() -> Outcome {
    let d = [16; 3];
    let mask = ball(d, [7.5; 3], 6.5);
    let vol = |seed| Volume::new(d, [1.0; 3], Unit::Ppm, rand_vec(4096, 0.2, seed)).unwrap();
    let (x, y) = (vol(70), vol(71));
    let e = |r: qsm_core::Result<f64>| r.map_err(|e| e.to_string());
    ensure(e(rmse_percent(&x, &x, &mask))? == 0.0, "rmse(x, x) != 0")?;
    let s = e(ssim(&x, &x, &mask))?;
    ensure((s - 1.0).abs() < 1e-12, format!("ssim(x, x) = {s}"))?;
    let shift = e(hfen_percent(&x.map(|v| v + 3.7), &x, &mask))?;
    ensure(shift < 1e-9, format!("hfen under offset {shift:e}"))?;

    let (lx, ly) = (log_oracle(&x), log_oracle(&y));
    let num: f64 = mask.indices().map(|i| (lx[i] - ly[i]).powi(2)).sum();
    let den: f64 = mask.indices().map(|i| ly[i].powi(2)).sum();
    let oracle = 100.0 * (num / den).sqrt();
    let got = e(hfen_percent(&x, &y, &mask))?;
    ensure((got - oracle).abs() < 1e-8, format!("hfen {got} vs direct LoG {oracle}"))?;
    Ok(format!("ssim {s}, offset hfen {shift:.1e}, hfen vs direct LoG diff {:.1e}", (got - oracle).abs()))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 13] = [
        (1, "dipole kernel analytics", kernel_analytics),
        (2, "sphere oracle", sphere_oracle),
        (3, "convolution equivalence", convolution_equivalence),
        (4, "TKD exactness", tkd_exactness),
        (5, "classical solver ordering", solver_ordering),
        (6, "neural ordering", neural_ordering),
        (7, "gradient checks", gradient_checks),
        (8, "non-local oracle", nonlocal_oracle),
        (9, "layer census", layer_census),
        (10, "RESHARP background removal", resharp_background),
        (11, "RMSprop recursion and schedule", rmsprop_recursion),
        (12, "determinism and resume", determinism),
        (13, "metric identities", metric_identities),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("QSM_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let line = match &outcome {
            Ok(detail) => format!("[PASS] {id:>2} {name}: {detail}"),
            Err(why) => format!("[FAIL] {id:>2} {name}: {why}"),
        };
        let _ = writeln!(std::io::stderr(), "{line}");
        if outcome.is_err() {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
