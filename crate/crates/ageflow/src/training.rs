//! Two-stage optimization: stage 1 fits the flow by maximum likelihood,
//! stage 2 alternates translator and discriminator updates in latent
//! space with the flow frozen. Also owns checkpoint assembly.

use crate::adversary::{
    age_cls_loss, age_cls_loss_backward, discriminator_loss, generator_adv_loss,
    generator_adv_loss_backward, total_generator_loss, Discriminator, GeneratorLossParts,
};
use crate::checkpoint::Checkpoint;
use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::glow::{self, gaussian_log_density, Glow, LatentState};
use crate::ictm::{consistency_loss, consistency_loss_backward, Ictm, PriorGenerator};
use crate::numerics::{AdamOptimizer, Param, Rng, Scalar, Tensor};
use crate::semantics::{akd_loss, akd_loss_backward, akd_target, PrototypeTable};
use crate::toydata::{Dataset, Split, ATTRS, GROUPS};

// ── helpers ─────────────────────────────────────────────────────────────

fn batch_images<F: Scalar>(dataset: &Dataset, indices: &[usize]) -> Tensor<F> {
    let first = dataset.image(indices[0]);
    let (h, w) = (first.height, first.width);
    let mut out = Tensor::zeros(&[indices.len(), 1, h, w]);
    for (row, &i) in indices.iter().enumerate() {
        let img = dataset.image(i);
        for (dst, &src) in out.sample_mut(row).iter_mut().zip(&img.pixels) {
            *dst = F::from_f64(src as f64);
        }
    }
    out
}

fn zero_grads<F: Scalar>(params: Vec<(String, &mut Param<F>)>) {
    for (_, p) in params {
        p.zero_grad();
    }
}

/// Encode and pack a batch of dataset images with fresh dequantization.
fn encode_packed<F: Scalar>(
    glow: &Glow<F>,
    dataset: &Dataset,
    indices: &[usize],
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    let images = batch_images::<F>(dataset, indices);
    let (x, _) = glow::preprocess(&images, glow.config.dequant_bins, rng)?;
    let (z, _) = glow.encode(&x)?;
    glow::pack_latent(&z, &glow.config)
}

// ── stage 1: flow training ──────────────────────────────────────────────

pub struct StageOneResult<F> {
    pub glow: Glow<F>,
    /// CSV: iter,loss,bits_per_dim
    pub csv: String,
    /// Some(iteration) if training aborted on a non-finite loss; the model
    /// is the last finite-loss state.
    pub aborted_at: Option<usize>,
}

/// Maximum-likelihood training of the flow with gradient accumulation.
pub fn train_glow<F: Scalar>(config: &AppConfig, dataset: &Dataset) -> Result<StageOneResult<F>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let train_idx = dataset.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Dataset("empty train split".into()));
    }
    let tc = &config.train;
    let mut rng = Rng::new(tc.seed);
    let mut glow = Glow::<F>::new(config.glow.clone(), &mut rng.fork(1))?;

    // data-dependent ActNorm init on one drawn batch
    let init_indices: Vec<usize> =
        (0..tc.micro_batch).map(|_| train_idx[rng.below(train_idx.len())]).collect();
    let init_images = batch_images::<F>(dataset, &init_indices);
    let (init_x, _) = glow::preprocess(&init_images, config.glow.dequant_bins, &mut rng)?;
    glow.encode_with_init(&init_x)?;

    let mut optimizer = AdamOptimizer::new(tc.lr_glow);
    let mut csv = String::from("iter,loss,bits_per_dim\n");
    let dim = config.glow.dim();
    let mut last_good = glow.clone();

    for iter in 0..tc.glow_iters {
        let mut loss_sum = 0.0;
        for _ in 0..tc.accumulation {
            let indices: Vec<usize> =
                (0..tc.micro_batch).map(|_| train_idx[rng.below(train_idx.len())]).collect();
            let images = batch_images::<F>(dataset, &indices);
            let (x, logdet_pre) = glow::preprocess(&images, config.glow.dequant_bins, &mut rng)?;
            let (z, logdet, cache) = glow.encode_cached(&x)?;

            let log_pz = gaussian_log_density(&z);
            let n = indices.len() as f64;
            let micro_loss: f64 = log_pz
                .iter()
                .map(|&lp| glow::nll_from_parts(lp, logdet, logdet_pre))
                .sum::<f64>()
                / n;
            loss_sum += micro_loss;

            // dL/dz = z / n per sample; dL/d(per-sample logdet) sums to -1
            let inv_n = F::from_f64(1.0 / n);
            let dz = LatentState {
                splits: z.splits.iter().map(|t| t.scale(inv_n)).collect(),
                final_z: z.final_z.scale(inv_n),
            };
            glow.encode_backward(&cache, &dz, -1.0)?;
        }
        let loss = loss_sum / tc.accumulation as f64;
        let bpd = glow::bits_per_dim(loss, dim);
        if !loss.is_finite() {
            zero_grads(glow.params_mut());
            return Ok(StageOneResult { glow: last_good, csv, aborted_at: Some(iter) });
        }
        optimizer.step(glow.params_mut(), 1.0 / tc.accumulation as f64)?;
        csv.push_str(&format!("{iter},{loss},{bpd}\n"));
        last_good = glow.clone();
    }
    Ok(StageOneResult { glow, csv, aborted_at: None })
}

// ── prototype stage ─────────────────────────────────────────────────────

/// Encode and pack every training image, then average per (group, attr).
pub fn compute_prototype_stage<F: Scalar>(
    glow: &Glow<F>,
    dataset: &Dataset,
    seed: u64,
) -> Result<PrototypeTable<F>> {
    let train_idx = dataset.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Dataset("empty train split".into()));
    }
    let mut rng = Rng::new(seed).fork(0x9707);
    let mut latents = Vec::with_capacity(train_idx.len());
    let mut ages = Vec::with_capacity(train_idx.len());
    let mut attrs = Vec::with_capacity(train_idx.len());
    for chunk in train_idx.chunks(16) {
        let packed = encode_packed(glow, dataset, chunk, &mut rng)?;
        let shape: Vec<usize> = packed.shape()[1..].to_vec();
        for (row, &i) in chunk.iter().enumerate() {
            latents.push(Tensor::from_vec(&shape, packed.sample(row).to_vec()));
            ages.push(dataset.entries[i].group);
            attrs.push(dataset.entries[i].attr);
        }
    }
    let table = PrototypeTable::compute(&latents, &ages, &attrs, GROUPS, ATTRS)?;
    table.require_all()?;
    Ok(table)
}

// ── stage 2: translator + discriminator ─────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    TranslatorStep(usize),
    DiscriminatorStep(usize),
}

pub struct StageTwoResult<F> {
    pub ictm: Ictm<F>,
    pub prior: PriorGenerator<F>,
    pub disc: Discriminator<F>,
    /// CSV: iter,loss,akd,al,acl,cl,disc
    pub csv: String,
}

pub fn train_ictm<F: Scalar>(
    config: &AppConfig,
    glow: &Glow<F>,
    prototypes: &PrototypeTable<F>,
    dataset: &Dataset,
) -> Result<StageTwoResult<F>> {
    train_ictm_with_hook(config, glow, prototypes, dataset, &mut |_| {})
}

pub fn train_ictm_with_hook<F: Scalar>(
    config: &AppConfig,
    glow: &Glow<F>,
    prototypes: &PrototypeTable<F>,
    dataset: &Dataset,
    hook: &mut dyn FnMut(TrainPhase),
) -> Result<StageTwoResult<F>> {
    config.validate()?;
    prototypes.require_all()?;
    let tc = &config.train;
    let train_idx = dataset.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Dataset("empty train split".into()));
    }
    let by_group = dataset.train_indices_by_group();
    for (g, members) in by_group.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Dataset(format!("no training samples for group {g}")));
        }
    }

    let mut rng = Rng::new(tc.seed).fork(2);
    let mut ictm = Ictm::<F>::new(config.ictm.clone(), &mut rng.fork(10))?;
    let mut prior = PriorGenerator::<F>::new(config.ictm.groups, config.ictm.cond_dim, &mut rng.fork(11));
    let (packed_c, hf, wf) = config.glow.packed_shape();
    let flat_dim = packed_c * hf * wf;
    let mut disc = Discriminator::<F>::new(flat_dim, config.ictm.groups, &mut rng.fork(12));

    let mut opt_t = AdamOptimizer::new(tc.lr_ictm);
    let mut opt_d = AdamOptimizer::new(tc.lr_disc);
    let mut csv = String::from("iter,loss,akd,al,acl,cl,disc\n");
    let plane = hf * wf;
    let groups = config.ictm.groups;
    let s_scale = tc.manip_scale;
    let weights = &tc.weights;

    for iter in 0..tc.ictm_iters {
        hook(TrainPhase::TranslatorStep(iter));
        let mut parts_sum = GeneratorLossParts::default();
        let mut loss_sum = 0.0;
        // (fakes, target groups, real sample indices) retained for the D step
        let mut d_fakes: Vec<Tensor<F>> = Vec::new();
        let mut d_targets: Vec<usize> = Vec::new();
        let mut d_real_idx: Vec<usize> = Vec::new();

        for _ in 0..tc.accumulation {
            let n = tc.micro_batch;
            let inv_n = 1.0 / n as f64;
            let indices: Vec<usize> = (0..n).map(|_| train_idx[rng.below(train_idx.len())]).collect();
            let src_groups: Vec<usize> = indices.iter().map(|&i| dataset.entries[i].group).collect();
            let attrs: Vec<usize> = indices.iter().map(|&i| dataset.entries[i].attr).collect();
            // uniform over the other n-1 groups
            let tgt_groups: Vec<usize> = src_groups
                .iter()
                .map(|&g| {
                    let mut t = rng.below(groups - 1);
                    if t >= g {
                        t += 1;
                    }
                    t
                })
                .collect();
            for (&t, &i) in tgt_groups.iter().zip(&indices) {
                let _ = i;
                let members = &by_group[t];
                d_real_idx.push(members[rng.below(members.len())]);
                d_targets.push(t);
            }

            let z_s = encode_packed(glow, dataset, &indices, &mut rng)?;
            let (cond_t, cache_prior_t) = prior.forward_cached(&tgt_groups)?;
            let (cond_s_true, cache_prior_s) = prior.forward_cached(&src_groups)?;

            let u_in = ictm.build_combined(&z_s, &cond_t)?;
            let (u_out, cache_ictm) = ictm.forward_combined_cached(&u_in)?;
            let (z_t, rec_conds) = ictm.split_combined(&u_out);
            z_t.ensure_finite("ictm output")?;

            // losses
            let sample_shape: Vec<usize> = z_s.shape()[1..].to_vec();
            let mut akd_sum = 0.0;
            let mut d_z_t = Tensor::<F>::zeros(z_t.shape());
            for row in 0..n {
                let z_row = Tensor::from_vec(&sample_shape, z_s.sample(row).to_vec());
                let target = akd_target(
                    &z_row,
                    prototypes,
                    src_groups[row],
                    tgt_groups[row],
                    attrs[row],
                    s_scale,
                )?;
                let pred = Tensor::from_vec(&sample_shape, z_t.sample(row).to_vec());
                akd_sum += akd_loss(&pred, &target);
                let g = akd_loss_backward(&pred, &target)
                    .scale(F::from_f64(weights.akd * inv_n));
                d_z_t.sample_mut(row).copy_from_slice(g.data());
            }
            let l_akd = akd_sum * inv_n;

            let z_t_flat = z_t.clone().reshape(&[n, flat_dim]);
            let (scores_t, logits_t, cache_disc) = disc.forward_cached(&z_t_flat, 1)?;
            let scores_vec: Vec<f64> = scores_t.data().iter().map(|v| v.as_f64()).collect();
            let l_al = generator_adv_loss(&scores_vec);
            let mut l_acl = 0.0;
            let mut dlogits = Tensor::<F>::zeros(logits_t.shape());
            for row in 0..n {
                let row_logits = Tensor::from_vec(&[groups], logits_t.sample(row).to_vec());
                l_acl += age_cls_loss(&row_logits, tgt_groups[row]) * inv_n;
                let g = age_cls_loss_backward(&row_logits, tgt_groups[row])
                    .scale(F::from_f64(weights.acl * inv_n));
                dlogits.sample_mut(row).copy_from_slice(g.data());
            }
            let mut l_cl = 0.0;
            let mut d_rec: Vec<Vec<F>> = Vec::with_capacity(n);
            let mut d_true: Vec<Vec<F>> = Vec::with_capacity(n);
            for row in 0..n {
                l_cl += consistency_loss(&rec_conds[row], &cond_s_true[row]) * inv_n;
                let (dr, dt) = consistency_loss_backward(&rec_conds[row], &cond_s_true[row]);
                let w = F::from_f64(weights.cl * inv_n);
                d_rec.push(dr.into_iter().map(|v| v * w).collect());
                d_true.push(dt.into_iter().map(|v| v * w).collect());
            }

            let parts = GeneratorLossParts { akd: l_akd, al: l_al, acl: l_acl, cl: l_cl };
            let micro_loss = total_generator_loss(&parts, weights);
            if !micro_loss.is_finite() {
                return Err(Error::NonFinite(format!("translator loss at iteration {iter}")));
            }
            loss_sum += micro_loss;
            parts_sum.akd += l_akd;
            parts_sum.al += l_al;
            parts_sum.acl += l_acl;
            parts_sum.cl += l_cl;

            // ── backward ──
            // adversarial + classification gradients enter through D
            let dscores: Vec<f64> = generator_adv_loss_backward(&scores_vec)
                .into_iter()
                .map(|g| g * weights.al)
                .collect();
            let dscores_t = Tensor::from_vec(&[n], dscores.iter().map(|&v| F::from_f64(v)).collect());
            let dz_flat = disc.backward(&cache_disc, &dscores_t, &dlogits);
            d_z_t.add_assign(&dz_flat.reshape(z_t.shape()));

            // assemble gradient of the combined output tensor
            let mut du_out = Tensor::<F>::zeros(u_out.shape());
            let inv_plane = F::from_f64(1.0 / plane as f64);
            for row in 0..n {
                let dst = du_out.sample_mut(row);
                dst[..flat_dim].copy_from_slice(d_z_t.sample(row));
                for (d, &g) in d_rec[row].iter().enumerate() {
                    let base = (packed_c + d) * plane;
                    for p in 0..plane {
                        dst[base + p] = g * inv_plane;
                    }
                }
            }
            let du_in = ictm.backward_combined(&cache_ictm, &du_out);

            // condition-channel input grads -> prior generator (target side)
            let mut d_cond_t: Vec<Vec<F>> = Vec::with_capacity(n);
            for row in 0..n {
                let src = du_in.sample(row);
                let mut flat = vec![F::zero(); 2 * config.ictm.cond_dim];
                for (d, slot) in flat.iter_mut().enumerate() {
                    let base = (packed_c + d) * plane;
                    let mut acc = F::zero();
                    for p in 0..plane {
                        acc = acc + src[base + p];
                    }
                    *slot = acc;
                }
                d_cond_t.push(flat);
            }
            prior.backward(&cache_prior_t, &d_cond_t);
            prior.backward(&cache_prior_s, &d_true);

            // keep the fakes for the discriminator step
            for row in 0..n {
                d_fakes.push(Tensor::from_vec(&[flat_dim], z_t.sample(row).to_vec()));
            }
        }

        // translator step: ICTM and prior generator update together
        let grad_scale = 1.0 / tc.accumulation as f64;
        let mut t_params = ictm.params_mut();
        t_params.extend(prior.params_mut());
        opt_t.step(t_params, grad_scale)?;
        // drop the generator-step gradients that leaked into D
        zero_grads(disc.params_mut());

        // ── discriminator step on real z_t and the same fakes ──
        hook(TrainPhase::DiscriminatorStep(iter));
        let total = d_fakes.len();
        let z_real = encode_packed(glow, dataset, &d_real_idx, &mut rng)?;
        let z_real_flat = z_real.reshape(&[total, flat_dim]);
        let mut z_fake_flat = Tensor::<F>::zeros(&[total, flat_dim]);
        for (row, f) in d_fakes.iter().enumerate() {
            z_fake_flat.sample_mut(row).copy_from_slice(f.data());
        }

        disc.persist_power_iteration();
        let (sr, logits_r, cache_real) = disc.forward_cached(&z_real_flat, 1)?;
        let (sf, _, cache_fake) = disc.forward_cached(&z_fake_flat, 1)?;
        let sr_vec: Vec<f64> = sr.data().iter().map(|v| v.as_f64()).collect();
        let sf_vec: Vec<f64> = sf.data().iter().map(|v| v.as_f64()).collect();
        let l_d = discriminator_loss(&sr_vec, &sf_vec, &logits_r, &d_targets, weights);
        if !l_d.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss at iteration {iter}")));
        }

        let inv_total = 1.0 / total as f64;
        let dsr = Tensor::from_vec(
            &[total],
            sr_vec.iter().map(|&s| F::from_f64((s - 1.0) * inv_total)).collect(),
        );
        let dsf = Tensor::from_vec(
            &[total],
            sf_vec.iter().map(|&s| F::from_f64(s * inv_total)).collect(),
        );
        let mut dlogits_r = Tensor::<F>::zeros(logits_r.shape());
        for row in 0..total {
            let row_logits = Tensor::from_vec(&[groups], logits_r.sample(row).to_vec());
            let g = age_cls_loss_backward(&row_logits, d_targets[row])
                .scale(F::from_f64(weights.acl_d * inv_total));
            dlogits_r.sample_mut(row).copy_from_slice(g.data());
        }
        let zero_logits = Tensor::<F>::zeros(logits_r.shape());
        disc.backward(&cache_real, &dsr, &dlogits_r);
        disc.backward(&cache_fake, &dsf, &zero_logits);
        opt_d.step(disc.params_mut(), 1.0)?;

        let inv_acc = 1.0 / tc.accumulation as f64;
        csv.push_str(&format!(
            "{iter},{},{},{},{},{},{l_d}\n",
            loss_sum * inv_acc,
            parts_sum.akd * inv_acc,
            parts_sum.al * inv_acc,
            parts_sum.acl * inv_acc,
            parts_sum.cl * inv_acc,
        ));
    }

    Ok(StageTwoResult { ictm, prior, disc, csv })
}

// ── checkpoint assembly ─────────────────────────────────────────────────

pub const META_CONFIG: &str = "meta/config_json";
pub const META_ITERATION: &str = "meta/iteration";

fn save_params<F: Scalar>(ckpt: &mut Checkpoint<F>, params: Vec<(String, &mut Param<F>)>) -> Result<()> {
    for (name, p) in params {
        ckpt.insert(name, p.value.clone())?;
    }
    Ok(())
}

fn load_params<F: Scalar>(ckpt: &Checkpoint<F>, params: Vec<(String, &mut Param<F>)>) -> Result<()> {
    for (name, p) in params {
        let t = ckpt.require(&name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} in file, model expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
        p.grad = Tensor::zeros(t.shape());
    }
    Ok(())
}

/// Stage-1 output: flow parameters plus config echo and iteration counter.
pub fn glow_checkpoint<F: Scalar>(
    glow: &Glow<F>,
    config: &AppConfig,
    iteration: usize,
) -> Result<Checkpoint<F>> {
    let mut ckpt = Checkpoint::new();
    let mut snapshot = glow.clone();
    save_params(&mut ckpt, snapshot.params_mut())?;
    for (name, t) in glow.buffers() {
        ckpt.insert(name, t)?;
    }
    ckpt.set_text(META_CONFIG, &config.to_json());
    ckpt.set_scalar(META_ITERATION, iteration as f64);
    Ok(ckpt)
}

pub fn config_from_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>) -> Result<AppConfig> {
    AppConfig::from_json(&ckpt.get_text(META_CONFIG)?)
}

pub fn glow_from_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>) -> Result<(Glow<F>, AppConfig)> {
    let config = config_from_checkpoint(ckpt)?;
    let mut glow = Glow::<F>::identity(config.glow.clone())?;
    load_params(ckpt, glow.params_mut())?;
    glow.load_buffers(&|name| ckpt.get(name).cloned())?;
    Ok((glow, config))
}

pub fn add_prototypes<F: Scalar>(ckpt: &mut Checkpoint<F>, table: &PrototypeTable<F>) -> Result<()> {
    let mut counts = Tensor::<F>::zeros(&[table.groups, table.attrs]);
    for (g, a) in table.populated().collect::<Vec<_>>() {
        ckpt.upsert(format!("proto/{g}/{a}"), table.get(g, a)?.clone());
        counts.data_mut()[g * table.attrs + a] = F::from_f64(table.count(g, a) as f64);
    }
    ckpt.upsert("proto/counts", counts);
    Ok(())
}

pub fn prototypes_from_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>) -> Result<PrototypeTable<F>> {
    let counts = ckpt.require("proto/counts")?;
    let (groups, attrs) = (counts.shape()[0], counts.shape()[1]);
    let mut cells = Vec::new();
    for g in 0..groups {
        for a in 0..attrs {
            let count = counts.data()[g * attrs + a].as_f64() as usize;
            if count > 0 {
                let mean = ckpt.require(&format!("proto/{g}/{a}"))?.clone();
                cells.push(((g, a), (mean, count)));
            }
        }
    }
    Ok(PrototypeTable::from_cells(groups, attrs, cells))
}

/// Full stage-2 checkpoint: flow, prototypes, translator, prior, and
/// discriminator (with its power-iteration state).
pub fn full_checkpoint<F: Scalar>(
    glow: &Glow<F>,
    table: &PrototypeTable<F>,
    ictm: &Ictm<F>,
    prior: &PriorGenerator<F>,
    disc: &Discriminator<F>,
    config: &AppConfig,
    iteration: usize,
) -> Result<Checkpoint<F>> {
    let mut ckpt = glow_checkpoint(glow, config, iteration)?;
    add_prototypes(&mut ckpt, table)?;
    let mut ictm_snapshot = ictm.clone();
    save_params(&mut ckpt, ictm_snapshot.params_mut())?;
    let mut prior_snapshot = prior.clone();
    save_params(&mut ckpt, prior_snapshot.params_mut())?;
    let mut disc_snapshot = disc.clone();
    save_params(&mut ckpt, disc_snapshot.params_mut())?;
    for (name, t) in disc.buffers() {
        ckpt.insert(name, t)?;
    }
    Ok(ckpt)
}

pub struct LoadedModels<F> {
    pub config: AppConfig,
    pub glow: Glow<F>,
    pub prototypes: Option<PrototypeTable<F>>,
    pub ictm: Option<Ictm<F>>,
    pub prior: Option<PriorGenerator<F>>,
    pub disc: Option<Discriminator<F>>,
}

/// Load whatever the checkpoint contains; stage-1 files have only the flow.
pub fn load_models<F: Scalar>(ckpt: &Checkpoint<F>) -> Result<LoadedModels<F>> {
    let (glow, config) = glow_from_checkpoint(ckpt)?;
    let prototypes = if ckpt.contains("proto/counts") {
        Some(prototypes_from_checkpoint(ckpt)?)
    } else {
        None
    };
    let seed = Rng::new(0);
    let ictm = if ckpt.contains("ictm/f0/conv1/weight") {
        let mut m = Ictm::<F>::new(config.ictm.clone(), &mut seed.fork(1))?;
        load_params(ckpt, m.params_mut())?;
        Some(m)
    } else {
        None
    };
    let prior = if ckpt.contains("prior/hidden/weight") {
        let mut p = PriorGenerator::<F>::new(config.ictm.groups, config.ictm.cond_dim, &mut seed.fork(2));
        load_params(ckpt, p.params_mut())?;
        Some(p)
    } else {
        None
    };
    let disc = if ckpt.contains("disc/dense1/weight") {
        let (packed_c, hf, wf) = config.glow.packed_shape();
        let mut d = Discriminator::<F>::new(packed_c * hf * wf, config.ictm.groups, &mut seed.fork(3));
        load_params(ckpt, d.params_mut())?;
        d.load_buffers(&|name| ckpt.get(name).cloned())?;
        Some(d)
    } else {
        None
    };
    Ok(LoadedModels { config, glow, prototypes, ictm, prior, disc })
}
