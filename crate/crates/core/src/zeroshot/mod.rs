//! Zero-shot classification by similarity to label text embeddings.

use std::path::Path;

use crate::corpus::{Corpus, Modality, MultimodalWindow, NULL_LABEL, TEXT_DIM};
use crate::error::{Error, Result};
use crate::models::JointModel;
use crate::pretrain::cosine_matrix;

/// Ordered label names with their text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable {
    pub names: Vec<String>,
    pub embeddings: Vec<Vec<f32>>,
    /// Whether the last entry is the synthesized NULL label.
    pub has_null: bool,
}

impl LabelTable {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Builds a table; with `include_null` a NULL entry equal to the mean embedding is appended.
pub fn build_label_table(labels: &[String], embeddings: &[Vec<f32>], include_null: bool) -> Result<LabelTable> {
    if labels.len() != embeddings.len() {
        return Err(Error::Input(format!("{} labels but {} embeddings", labels.len(), embeddings.len())));
    }
    if let Some((name, e)) = labels.iter().zip(embeddings).find(|(_, e)| e.len() != TEXT_DIM) {
        return Err(Error::Input(format!("embedding of '{name}' has {} values, expected {TEXT_DIM}", e.len())));
    }
    if include_null && labels.is_empty() {
        return Err(Error::Input("NULL entry needs at least one label".into()));
    }
    let mut names = labels.to_vec();
    let mut embeddings = embeddings.to_vec();
    if include_null {
        let n = embeddings.len() as f64;
        let mean = (0..TEXT_DIM)
            .map(|j| (embeddings.iter().map(|e| e[j] as f64).sum::<f64>() / n) as f32)
            .collect();
        names.push(NULL_LABEL.to_string());
        embeddings.push(mean);
    }
    Ok(LabelTable {
        names,
        embeddings,
        has_null: include_null,
    })
}

/// Reads `label, v1, ..., v1536` rows; a header row is skipped when its second field is not numeric.
pub fn read_label_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest_err(path, 0, e.to_string()))?;
    let (mut names, mut embeddings) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| ingest_err(path, line, e.to_string()))?;
        if i == 0 && rec.get(1).is_some_and(|v| v.parse::<f32>().is_err()) {
            continue;
        }
        let name = rec.get(0).unwrap_or_default().to_string();
        let values: Vec<f32> = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f32>().map_err(|_| ingest_err(path, line, format!("'{v}' is not a number"))))
            .collect::<Result<_>>()?;
        if values.len() != TEXT_DIM {
            return Err(ingest_err(path, line, format!("{} values, expected {TEXT_DIM}", values.len())));
        }
        names.push(name);
        embeddings.push(values);
    }
    Ok((names, embeddings))
}

fn ingest_err(path: &Path, line: usize, reason: String) -> Error {
    Error::Ingest {
        file: path.to_path_buf(),
        line: line as u64,
        reason,
    }
}

/// Text embedding of each non-NULL class, taken from its first window that carries text.
pub fn corpus_label_embeddings(corpus: &Corpus) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    let null = corpus.null_label();
    let (mut names, mut embeddings) = (Vec::new(), Vec::new());
    for (c, name) in corpus.label_names.iter().enumerate() {
        if null == Some(c as u32) {
            continue;
        }
        let text = corpus
            .windows
            .iter()
            .find(|w| w.label == Some(c as u32) && w.text.is_some())
            .and_then(|w| w.text.clone())
            .ok_or_else(|| Error::Data(format!("class '{name}' has no text embedding")))?;
        names.push(name.clone());
        embeddings.push(text);
    }
    Ok((names, embeddings))
}

/// Ranks table entries for each payload by descending cosine similarity in the joint space.
///
/// Ties keep table order.
pub fn zero_shot_rank(model: &JointModel<f32>, payloads: &[&[f32]], m: Modality, table: &LabelTable) -> Result<Vec<Vec<usize>>> {
    model.tower(Modality::Text)?;
    model.tower(m)?;
    if table.is_empty() {
        return Err(Error::Input("empty label table".into()));
    }
    let labels: Vec<&[f32]> = table.embeddings.iter().map(Vec::as_slice).collect();
    let label_reps = model.embed_payloads(&labels, Modality::Text, 128)?;
    let reps = model.embed_payloads(payloads, m, 128)?;
    let sims = cosine_matrix(&reps, &label_reps);
    let k = table.len();
    Ok(sims.chunks(k).map(rank_descending).collect())
}

/// Indices sorted by descending score; equal scores keep index order.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Fraction of rankings whose truth appears among the first `k` entries.
pub fn top_k_accuracy(rankings: &[Vec<usize>], truths: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    if rankings.len() != truths.len() {
        return Err(Error::dim("top_k_accuracy", &[rankings.len()], &[truths.len()]));
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.iter().take(k).any(|x| x == *t))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Top-k accuracies of one modality over labeled windows.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotReport {
    pub modality: Modality,
    pub windows: usize,
    pub top_k: Vec<(usize, f64)>,
}

/// Ranks labeled `windows` and scores them at each `k`.
///
/// Window labels are matched to table entries by name; windows whose label is
/// not in the table are skipped.
pub fn evaluate(
    model: &JointModel<f32>,
    corpus: &Corpus,
    windows: &[&MultimodalWindow],
    m: Modality,
    table: &LabelTable,
    ks: &[usize],
) -> Result<ZeroShotReport> {
    let mut payloads = Vec::new();
    let mut truths = Vec::new();
    for w in windows {
        let Some(l) = w.label else { continue };
        let Some(t) = corpus.label_names.get(l as usize).and_then(|n| table.index_of(n)) else {
            continue;
        };
        let p = w
            .payload(m)
            .ok_or_else(|| Error::Data(format!("window of clip {} lacks {m}", w.clip)))?;
        payloads.push(p);
        truths.push(t);
    }
    if payloads.is_empty() {
        return Err(Error::Data("no window label matches the label table".into()));
    }
    let rankings = zero_shot_rank(model, &payloads, m, table)?;
    let top_k = ks
        .iter()
        .map(|&k| Ok((k, top_k_accuracy(&rankings, &truths, k)?)))
        .collect::<Result<_>>()?;
    Ok(ZeroShotReport {
        modality: m,
        windows: payloads.len(),
        top_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..TEXT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn null_entry_is_the_mean() {
        let (e1, e2) = (emb(1), emb(2));
        let t = build_label_table(&names(2), &[e1.clone(), e2.clone()], true).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.names[2], NULL_LABEL);
        for j in 0..TEXT_DIM {
            assert_eq!(t.embeddings[2][j], ((e1[j] as f64 + e2[j] as f64) / 2.0) as f32);
        }
        let one = build_label_table(&names(1), &[e1.clone()], true).unwrap();
        assert_eq!(one.embeddings[1], e1);
        assert_eq!(build_label_table(&names(2), &[e1.clone(), e2], false).unwrap().len(), 2);
        assert!(matches!(build_label_table(&names(1), &[vec![0.0; 5]], false), Err(Error::Input(_))));
        assert!(build_label_table(&names(2), &[e1], false).is_err());
    }

    #[test]
    fn top_k_reference_cases() {
        let r = vec![vec![0, 1, 2]];
        assert_eq!(top_k_accuracy(&r, &[1], 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&r, &[1], 2).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&r, &[2], 7).unwrap(), 1.0);
        assert!(top_k_accuracy(&r, &[1], 0).is_err());
    }

    #[test]
    fn ties_keep_table_order() {
        assert_eq!(rank_descending(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn random_rankings_hit_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, n) = (8usize, 20_000usize);
        let mut rankings = Vec::with_capacity(n);
        let mut truths = Vec::with_capacity(n);
        for _ in 0..n {
            let mut r: Vec<usize> = (0..k).collect();
            r.shuffle(&mut rng);
            rankings.push(r);
            truths.push(rng.random_range(0..k));
        }
        let p = 1.0 / k as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((top_k_accuracy(&rankings, &truths, 1).unwrap() - p).abs() < 3.0 * sd);
    }

    #[test]
    fn own_text_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = JointModel::<f32>::new(&[Modality::Text, Modality::Sensor], 1, &mut rng).unwrap();
        let embs: Vec<Vec<f32>> = (0..5).map(|i| emb(10 + i)).collect();
        let table = build_label_table(&names(5), &embs, true).unwrap();
        let payloads: Vec<&[f32]> = embs.iter().map(Vec::as_slice).collect();
        let ranks = zero_shot_rank(&model, &payloads, Modality::Text, &table).unwrap();
        for (i, r) in ranks.iter().enumerate() {
            assert_eq!(r[0], i);
            let mut sorted = r.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        }
        let dup = build_label_table(&names(2), &[embs[0].clone(), embs[0].clone()], false).unwrap();
        assert_eq!(zero_shot_rank(&model, &payloads[..1], Modality::Text, &dup).unwrap()[0], vec![0, 1]);
        assert!(matches!(zero_shot_rank(&model, &payloads, Modality::Pose, &table), Err(Error::Config(_))));
    }

    #[test]
    fn label_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let (a, b) = (emb(1), emb(2));
        let mut text = String::from("label,values\n");
        for (n, e) in [("walk", &a), ("run", &b)] {
            text.push_str(n);
            for v in e {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        let (names, embs) = read_label_csv(&path).unwrap();
        assert_eq!(names, vec!["walk", "run"]);
        assert_eq!(embs, vec![a, b]);
        std::fs::write(&path, "walk,1,2\n").unwrap();
        assert!(matches!(read_label_csv(&path), Err(Error::Ingest { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn top_k_is_monotone(seed in any::<u64>(), k_labels in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rankings: Vec<Vec<usize>> = (0..30).map(|_| {
                let mut r: Vec<usize> = (0..k_labels).collect();
                r.shuffle(&mut rng);
                r
            }).collect();
            let truths: Vec<usize> = (0..30).map(|_| rng.random_range(0..k_labels)).collect();
            let mut prev = 0.0;
            for k in 1..=k_labels + 1 {
                let acc = top_k_accuracy(&rankings, &truths, k).unwrap();
                prop_assert!(acc >= prev);
                prev = acc;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn ranking_is_scale_invariant(scores in proptest::collection::vec(-1.0f64..1.0, 1..12), s in 0.01f64..100.0) {
            let scaled: Vec<f64> = scores.iter().map(|v| v * s).collect();
            let r = rank_descending(&scores);
            prop_assert_eq!(&r, &rank_descending(&scaled));
            let mut sorted = r.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..scores.len()).collect::<Vec<_>>());
        }
    }
}
