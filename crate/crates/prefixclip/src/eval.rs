//! Evaluation battery for trained dual encoders: zero-shot classification
//! from prompt banks, test-time prefix sweeps, linear probes, retrieval,
//! class-name synonym shifts, and feature export.
//!
//! Every metric here is deterministic given a model and a dataset: batching
//! never changes embeddings, and all argmax and ranking ties break toward
//! the lowest index.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::data::{CaptionSample, ClassCatalog, EvalImage, PromptTemplateSet};
use crate::image::ImageSample;
use crate::model::DualEncoderModel;
use crate::tensor::{no_grad, TensorError};
use crate::train::prepare_texts;
use crate::vocab::{PrefixKind, VocabError, Vocabulary};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(
        "prefix sweep requires a model trained with prefix conditioning; \
         run zero-shot with no prefix instead"
    )]
    NeedsConditioning,
    #[error("linear probe needs at least two classes, got {0}")]
    ProbeNeedsTwoClasses(usize),
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("feature export needs at least 3 samples for stable projections, got {0}")]
    TooFewSamples(usize),
}

// ── embedding extraction ──

/// Unit-normalized image embeddings as plain rows.
pub fn embed_images(model: &DualEncoderModel, images: &[&ImageSample]) -> Result<Vec<Vec<f64>>, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let owned: Vec<ImageSample> = images.iter().map(|i| (*i).clone()).collect();
    let rows = no_grad(|| -> Result<Vec<Vec<f64>>, TensorError> {
        let emb = model.image.encode(&owned)?;
        let unit = emb.l2_normalize_rows()?;
        Ok(to_rows(&unit.to_vec(), model.image.cfg.d_out))
    })?;
    Ok(rows)
}

/// Unit-normalized text embeddings, with an optional prefix inserted into
/// every sequence.
pub fn embed_texts(
    model: &DualEncoderModel,
    vocab: &Vocabulary,
    texts: &[&str],
    prefix: Option<PrefixKind>,
) -> Result<Vec<Vec<f64>>, EvalError> {
    if texts.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let seqs = prepare_texts(vocab, texts, prefix, model.text.cfg.max_len)?;
    let rows = no_grad(|| -> Result<Vec<Vec<f64>>, TensorError> {
        let emb = model.text.encode(&seqs)?;
        let unit = emb.l2_normalize_rows()?;
        Ok(to_rows(&unit.to_vec(), model.text.cfg.d_out))
    })?;
    Ok(rows)
}

fn to_rows(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks_exact(width).map(|c| c.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(row: &mut [f64]) {
    let norm = dot(row, row).sqrt();
    if norm > 1e-12 {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

// ── zero-shot classification ──

/// Per-class text anchors: each class name is rendered through every
/// template, each prompt embedding is normalized, and the normalized mean
/// becomes the class anchor.
pub struct ClassEmbeddingBank {
    pub class_ids: Vec<usize>,
    pub anchors: Vec<Vec<f64>>,
}

/// Which surface form of a class name feeds the prompt bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NameForm {
    Canonical,
    Synonym,
}

pub fn class_embedding_bank(
    model: &DualEncoderModel,
    vocab: &Vocabulary,
    catalog: &ClassCatalog,
    templates: &PromptTemplateSet,
    class_ids: &[usize],
    form: NameForm,
    prefix: Option<PrefixKind>,
) -> Result<ClassEmbeddingBank, EvalError> {
    if class_ids.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut anchors = Vec::with_capacity(class_ids.len());
    for &id in class_ids {
        let spec = catalog.class(id);
        let name = match form {
            NameForm::Canonical => spec.name.as_str(),
            NameForm::Synonym => spec.synonym.as_str(),
        };
        let prompts = templates.build_prompts(name);
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let rows = embed_texts(model, vocab, &refs, prefix)?;
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for row in &rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / rows.len() as f64;
            }
        }
        normalize(&mut mean);
        anchors.push(mean);
    }
    Ok(ClassEmbeddingBank { class_ids: class_ids.to_vec(), anchors })
}

#[derive(Debug, Clone, Serialize)]
pub struct ZeroShotReport {
    pub accuracy: f64,
    pub n: usize,
    /// (class id, accuracy on that class)
    pub per_class: Vec<(usize, f64)>,
}

pub fn zero_shot_classify(
    model: &DualEncoderModel,
    bank: &ClassEmbeddingBank,
    images: &[EvalImage],
) -> Result<ZeroShotReport, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let refs: Vec<&ImageSample> = images.iter().map(|e| &e.image).collect();
    let rows = embed_images(model, &refs)?;
    let mut correct = 0usize;
    let mut per_class: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for (row, img) in rows.iter().zip(images) {
        let scores: Vec<f64> = bank.anchors.iter().map(|a| dot(row, a)).collect();
        let pred = bank.class_ids[argmax_lowest(&scores)];
        let entry = per_class.entry(img.class_id).or_insert((0, 0));
        entry.1 += 1;
        if pred == img.class_id {
            correct += 1;
            entry.0 += 1;
        }
    }
    Ok(ZeroShotReport {
        accuracy: correct as f64 / images.len() as f64,
        n: images.len(),
        per_class: per_class
            .into_iter()
            .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
            .collect(),
    })
}

// ── test-time prefix sweep ──

#[derive(Debug, Clone, Serialize)]
pub struct PrefixSweepReport {
    /// (prefix kind, zero-shot accuracy with a bank built under it)
    pub per_prefix: Vec<(PrefixKind, f64)>,
}

/// Builds one bank per prefix kind and classifies the same images with
/// each. Only meaningful when the model saw prefixes during training.
pub fn prefix_sweep(
    model: &DualEncoderModel,
    vocab: &Vocabulary,
    catalog: &ClassCatalog,
    templates: &PromptTemplateSet,
    class_ids: &[usize],
    images: &[EvalImage],
    trained_with_prefixes: bool,
) -> Result<PrefixSweepReport, EvalError> {
    if !trained_with_prefixes {
        return Err(EvalError::NeedsConditioning);
    }
    let mut per_prefix = Vec::new();
    for kind in [PrefixKind::Prompt, PrefixKind::Caption] {
        let bank = class_embedding_bank(
            model,
            vocab,
            catalog,
            templates,
            class_ids,
            NameForm::Canonical,
            Some(kind),
        )?;
        let report = zero_shot_classify(model, &bank, images)?;
        per_prefix.push((kind, report.accuracy));
    }
    Ok(PrefixSweepReport { per_prefix })
}

// ── linear probe ──

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub best_lambda: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Multinomial logistic regression on frozen features: full-batch gradient
/// descent, ridge penalty swept over a fixed grid against a held-out fifth
/// of the training set.
pub fn linear_probe_core(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
) -> Result<ProbeReport, EvalError> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let classes: std::collections::BTreeSet<usize> = train_y.iter().copied().collect();
    if classes.len() < 2 {
        return Err(EvalError::ProbeNeedsTwoClasses(classes.len()));
    }
    let class_list: Vec<usize> = classes.into_iter().collect();
    let class_index = |y: usize| class_list.iter().position(|&c| c == y).expect("train label");

    // every fifth sample validates the ridge sweep
    let mut fit_x = Vec::new();
    let mut fit_y = Vec::new();
    let mut val_x = Vec::new();
    let mut val_y = Vec::new();
    for (i, (x, &y)) in train_x.iter().zip(train_y).enumerate() {
        if i % 5 == 0 {
            val_x.push(x.clone());
            val_y.push(class_index(y));
        } else {
            fit_x.push(x.clone());
            fit_y.push(class_index(y));
        }
    }
    if val_x.is_empty() || fit_x.is_empty() {
        return Err(EvalError::EmptySet);
    }

    let mut best: Option<(f64, f64, Vec<Vec<f64>>)> = None;
    for &lambda in &[1e-4, 1e-2, 1.0] {
        let w = fit_logreg(&fit_x, &fit_y, class_list.len(), lambda);
        let val_acc = logreg_accuracy(&w, &val_x, &val_y);
        let better = match &best {
            None => true,
            Some((acc, _, _)) => val_acc > *acc,
        };
        if better {
            best = Some((val_acc, lambda, w));
        }
    }
    let (val_accuracy, best_lambda, w) = best.expect("nonempty grid");

    let test_idx: Vec<usize> = test_y.iter().map(|&y| class_index(y)).collect();
    let test_accuracy = logreg_accuracy(&w, test_x, &test_idx);
    Ok(ProbeReport { best_lambda, val_accuracy, test_accuracy })
}

/// Full-batch GD on softmax cross-entropy with ridge decay on weights (the
/// bias column is exempt). Returns W as `classes x (dim + 1)`.
fn fit_logreg(xs: &[Vec<f64>], ys: &[usize], classes: usize, lambda: f64) -> Vec<Vec<f64>> {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut w = vec![vec![0.0; d + 1]; classes];
    let lr = 0.5;
    for _ in 0..500 {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for (x, &y) in xs.iter().zip(ys) {
            let mut logits: Vec<f64> = w.iter().map(|row| dot(&row[..d], x) + row[d]).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for l in &mut logits {
                *l = (*l - max).exp();
            }
            let z: f64 = logits.iter().sum();
            for (c, g) in grad.iter_mut().enumerate() {
                let p = logits[c] / z - if c == y { 1.0 } else { 0.0 };
                for (gj, xj) in g[..d].iter_mut().zip(x) {
                    *gj += p * xj / n;
                }
                g[d] += p / n;
            }
        }
        for (wr, gr) in w.iter_mut().zip(&grad) {
            for j in 0..d {
                wr[j] -= lr * (gr[j] + 2.0 * lambda * wr[j]);
            }
            wr[d] -= lr * gr[d];
        }
    }
    w
}

fn logreg_accuracy(w: &[Vec<f64>], xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let d = xs[0].len();
    let mut hit = 0usize;
    for (x, &y) in xs.iter().zip(ys) {
        let scores: Vec<f64> = w.iter().map(|row| dot(&row[..d], x) + row[d]).collect();
        if argmax_lowest(&scores) == y {
            hit += 1;
        }
    }
    hit as f64 / xs.len() as f64
}

/// Probes image features: fits on `probe_train`, reports on `test`.
pub fn linear_probe(
    model: &DualEncoderModel,
    probe_train: &[EvalImage],
    test: &[EvalImage],
) -> Result<ProbeReport, EvalError> {
    let train_refs: Vec<&ImageSample> = probe_train.iter().map(|e| &e.image).collect();
    let test_refs: Vec<&ImageSample> = test.iter().map(|e| &e.image).collect();
    let train_x = embed_images(model, &train_refs)?;
    let test_x = embed_images(model, &test_refs)?;
    let train_y: Vec<usize> = probe_train.iter().map(|e| e.class_id).collect();
    let test_y: Vec<usize> = test.iter().map(|e| e.class_id).collect();
    linear_probe_core(&train_x, &train_y, &test_x, &test_y)
}

// ── retrieval ──

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    /// (K, recall) for image-to-text ranking.
    pub image_to_text: Vec<(usize, f64)>,
    /// (K, recall) for text-to-image ranking.
    pub text_to_image: Vec<(usize, f64)>,
    /// Exact duplicate captions in the pool; recall counts only the paired
    /// index as correct, so duplicates depress the ceiling.
    pub duplicate_captions: usize,
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// 0-based rank of `truth` when candidates sort by descending score; on
/// equal scores the lower index sorts first.
pub fn rank_of_truth(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    let mut rank = 0;
    for (i, &x) in scores.iter().enumerate() {
        if x > s || (x == s && i < truth) {
            rank += 1;
        }
    }
    rank
}

pub fn recall_matrix(sim: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let n = sim.len();
    RECALL_KS
        .iter()
        .map(|&k| {
            let hits = sim
                .iter()
                .enumerate()
                .filter(|(i, row)| rank_of_truth(row, *i) < k)
                .count();
            (k, hits as f64 / n as f64)
        })
        .collect()
}

pub fn retrieval_eval(
    model: &DualEncoderModel,
    vocab: &Vocabulary,
    pairs: &[CaptionSample],
    prefix: Option<PrefixKind>,
) -> Result<RetrievalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let image_refs: Vec<&ImageSample> = pairs.iter().map(|p| &p.image).collect();
    let caption_refs: Vec<&str> = pairs.iter().map(|p| p.caption.as_str()).collect();
    let image_rows = embed_images(model, &image_refs)?;
    let text_rows = embed_texts(model, vocab, &caption_refs, prefix)?;

    let n = pairs.len();
    let mut i2t = vec![vec![0.0; n]; n];
    for (i, irow) in image_rows.iter().enumerate() {
        for (j, trow) in text_rows.iter().enumerate() {
            i2t[i][j] = dot(irow, trow);
        }
    }
    let t2i: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| i2t[i][j]).collect()).collect();

    let mut seen = std::collections::HashSet::new();
    let duplicate_captions = pairs.iter().filter(|p| !seen.insert(p.caption.as_str())).count();

    Ok(RetrievalReport {
        image_to_text: recall_matrix(&i2t),
        text_to_image: recall_matrix(&t2i),
        duplicate_captions,
    })
}

// ── class-name shift ──

#[derive(Debug, Clone, Serialize)]
pub struct NameShiftReport {
    pub canonical_accuracy: f64,
    /// Mean over the synonym variants.
    pub synonym_accuracy: f64,
    /// canonical minus synonym accuracy; smaller means the encoder treats
    /// the names as interchangeable.
    pub degradation: f64,
}

pub fn class_name_shift_eval(
    model: &DualEncoderModel,
    vocab: &Vocabulary,
    catalog: &ClassCatalog,
    templates: &PromptTemplateSet,
    class_ids: &[usize],
    images: &[EvalImage],
    prefix: Option<PrefixKind>,
) -> Result<NameShiftReport, EvalError> {
    let canonical = {
        let bank = class_embedding_bank(
            model,
            vocab,
            catalog,
            templates,
            class_ids,
            NameForm::Canonical,
            prefix,
        )?;
        zero_shot_classify(model, &bank, images)?.accuracy
    };
    let bank = class_embedding_bank(
        model,
        vocab,
        catalog,
        templates,
        class_ids,
        NameForm::Synonym,
        prefix,
    )?;
    let synonym_accuracy = zero_shot_classify(model, &bank, images)?.accuracy;
    Ok(NameShiftReport {
        canonical_accuracy: canonical,
        synonym_accuracy,
        degradation: canonical - synonym_accuracy,
    })
}

// ── feature export ──

/// First two principal directions via power iteration with deflation.
/// Returns zero-mean 2-D coordinates for each row.
pub fn pca_coords(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    if rows.is_empty() {
        return Vec::new();
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let mut components: Vec<Vec<f64>> = Vec::new();
    for c in 0..2usize.min(d) {
        // fixed pseudo-random start keeps the export deterministic
        let mut v: Vec<f64> = (0..d)
            .map(|j| (((j * 2654435761 + c * 40503 + 17) % 1000) as f64 / 1000.0) - 0.5)
            .collect();
        normalize(&mut v);
        for _ in 0..200 {
            // w = C v, with C = Xᵀ X implicitly
            let mut w = vec![0.0; d];
            for row in &centered {
                let proj = dot(row, &v)
                    - components.iter().map(|u| dot(u, &v) * dot(u, row)).sum::<f64>();
                for (wj, rj) in w.iter_mut().zip(row) {
                    *wj += proj * rj;
                }
            }
            for u in &components {
                let overlap = dot(&w, u);
                for (wj, uj) in w.iter_mut().zip(u) {
                    *wj -= overlap * uj;
                }
            }
            normalize(&mut w);
            v = w;
        }
        components.push(v);
    }

    centered
        .iter()
        .map(|row| {
            let a = dot(row, &components[0]);
            let b = if components.len() > 1 { dot(row, &components[1]) } else { 0.0 };
            [a, b]
        })
        .collect()
}

/// Mean silhouette over all samples: how tightly each sample sits in its
/// own group versus the nearest other group, in Euclidean distance.
/// Singleton-group samples score zero.
pub fn silhouette_score(rows: &[Vec<f64>], groups: &[usize]) -> f64 {
    assert_eq!(rows.len(), groups.len(), "one group per row");
    let distinct: std::collections::BTreeSet<usize> = groups.iter().copied().collect();
    assert!(distinct.len() >= 2, "silhouette needs at least two groups");
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for (j, other) in rows.iter().enumerate() {
            if i != j {
                let e = sums.entry(groups[j]).or_insert((0.0, 0));
                e.0 += dist(row, other);
                e.1 += 1;
            }
        }
        let own = sums.get(&groups[i]).copied();
        let nearest_other = sums
            .iter()
            .filter(|(g, _)| **g != groups[i])
            .map(|(_, (s, n))| s / *n as f64)
            .fold(f64::INFINITY, f64::min);
        if let Some((s, n)) = own {
            let a = s / n as f64;
            let b = nearest_other;
            total += (b - a) / a.max(b).max(1e-300);
        }
    }
    total / rows.len() as f64
}

/// One exported feature row.
pub struct FeatureRow<'a> {
    pub sample_id: usize,
    /// Which set or modality the row came from.
    pub source: &'a str,
    /// Ground-truth class, or -1 where none applies.
    pub class_id: i64,
    /// Prefix active when the features were produced: none, prompt, caption.
    pub prefix: &'a str,
    pub features: Vec<f64>,
}

/// CSV with header `sample_id,source,class_id,prefix,f0..,pca_x,pca_y`;
/// floats print in Rust's shortest round-trip form.
pub fn export_features(rows: &[FeatureRow<'_>], out: &mut dyn Write) -> Result<(), EvalError> {
    if rows.len() < 3 {
        return Err(EvalError::TooFewSamples(rows.len()));
    }
    let d = rows[0].features.len();
    let feats: Vec<Vec<f64>> = rows.iter().map(|r| r.features.clone()).collect();
    let coords = pca_coords(&feats);
    write!(out, "sample_id,source,class_id,prefix")?;
    for j in 0..d {
        write!(out, ",f{j}")?;
    }
    writeln!(out, ",pca_x,pca_y")?;
    for (row, coord) in rows.iter().zip(&coords) {
        write!(out, "{},{},{},{}", row.sample_id, row.source, row.class_id, row.prefix)?;
        for v in &row.features {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{},{}", coord[0], coord[1])?;
    }
    Ok(())
}

/// End-of-sequence attention over the tokens of each text, mean over heads
/// at one layer, for inspecting what the pooled embedding reads.
pub fn attention_report(
    model: &DualEncoderModel,
    vocab: &Vocabulary,
    texts: &[&str],
    prefix: Option<PrefixKind>,
    layer: usize,
) -> Result<Vec<Vec<(String, f64)>>, EvalError> {
    if texts.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let seqs = prepare_texts(vocab, texts, prefix, model.text.cfg.max_len)?;
    let report = no_grad(|| -> Result<Vec<Vec<(String, f64)>>, TensorError> {
        let (_, trace) = model.text.encode_traced(&seqs)?;
        (0..seqs.len())
            .map(|i| crate::text::end_token_attention(&trace, &seqs, i, layer, vocab))
            .collect()
    })?;
    Ok(report)
}
