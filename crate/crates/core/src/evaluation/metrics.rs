//! Alignment and classification metrics.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Cosine similarity; a zero vector on either side gives 0 with a warning.
pub fn cosine_alignment(restored: ArrayView1<f64>, truth: ArrayView1<f64>) -> f64 {
    assert_eq!(restored.len(), truth.len(), "cosine of unequal lengths");
    let na = restored.dot(&restored).sqrt();
    let nb = truth.dot(&truth).sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine with a zero vector, reporting 0");
        return 0.0;
    }
    (restored.dot(&truth) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine between class-mean features; classes with no samples get a zero mean
/// and therefore 0 off the diagonal. The diagonal is always 1.
pub fn category_similarity_matrix(features: ArrayView2<f64>, labels: &[usize], n_classes: usize) -> Result<Array2<f64>> {
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Config(format!("label {bad} outside {n_classes} classes")));
    }
    let mut means = Array2::<f64>::zeros((n_classes, features.ncols()));
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in features.rows().into_iter().zip(labels) {
        let mut m = means.row_mut(l);
        m += &row;
        counts[l] += 1;
    }
    for (mut m, &c) in means.rows_mut().into_iter().zip(&counts) {
        if c > 0 {
            m /= c as f64;
        }
    }
    let mut out = Array2::zeros((n_classes, n_classes));
    for i in 0..n_classes {
        out[[i, i]] = 1.0;
        for j in i + 1..n_classes {
            let c = cosine_alignment(means.row(i), means.row(j));
            out[[i, j]] = c;
            out[[j, i]] = c;
        }
    }
    Ok(out)
}

/// `m[[truth, predicted]]` counts.
pub fn confusion_matrix(predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<Array2<usize>> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut m = Array2::zeros((n_classes, n_classes));
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::Config(format!("class index outside {n_classes} classes")));
        }
        m[[t, p]] += 1;
    }
    Ok(m)
}

pub fn accuracy(confusion: &Array2<usize>) -> f64 {
    let total: usize = confusion.sum();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = confusion.diag().sum();
    hits as f64 / total as f64
}

/// Unweighted mean of per-class F1 over all classes; a class with no true
/// positives scores 0.
pub fn macro_f1(confusion: &Array2<usize>) -> f64 {
    let k = confusion.nrows();
    if k == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for c in 0..k {
        let tp = confusion[[c, c]] as f64;
        if tp == 0.0 {
            continue;
        }
        let fp = confusion.column(c).sum() as f64 - tp;
        let fn_ = confusion.row(c).sum() as f64 - tp;
        sum += 2.0 * tp / (2.0 * tp + fp + fn_);
    }
    sum / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_examples() {
        let x = array![0.3, -1.2, 2.0];
        assert!((cosine_alignment(x.view(), x.view()) - 1.0).abs() < 1e-15);
        let neg = -&x;
        assert!((cosine_alignment(x.view(), neg.view()) + 1.0).abs() < 1e-15);
        let c = cosine_alignment(array![1.0, 0.0].view(), array![1.0, 1.0].view());
        assert!((c - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine_alignment(array![0.0, 0.0].view(), x.slice(ndarray::s![..2])), 0.0);
    }

    #[test]
    fn similarity_matrix_hand_case() {
        // class 0 mean (1, 0), class 1 mean (1, 1)
        let f = array![[2.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]];
        let m = category_similarity_matrix(f.view(), &[0, 0, 1, 1], 2).unwrap();
        let h = 0.5f64.sqrt();
        assert_eq!(m[[0, 0]], 1.0);
        assert_eq!(m[[1, 1]], 1.0);
        assert!((m[[0, 1]] - h).abs() < 1e-15);
        assert_eq!(m[[0, 1]], m[[1, 0]]);

        // permuting samples leaves it unchanged
        let p = array![[1.0, 1.0], [0.0, 0.0], [1.0, 1.0], [2.0, 0.0]];
        let m2 = category_similarity_matrix(p.view(), &[1, 0, 1, 0], 2).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn constant_predictor_macro_f1_is_one_third() {
        let truth = [0, 0, 1, 1];
        let cm = confusion_matrix(&[0, 0, 0, 0], &truth, 2).unwrap();
        assert!((accuracy(&cm) - 0.5).abs() < 1e-15);
        // class 0: P = 1/2, R = 1 -> F1 = 2/3; class 1: 0
        assert!((macro_f1(&cm) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_match_confusion_oracle() {
        let truth = [0, 1, 2, 2, 1, 0, 2, 1];
        let pred = [0, 2, 2, 1, 1, 0, 2, 0];
        let cm = confusion_matrix(&pred, &truth, 3).unwrap();
        // independent count: per-class tp/fp/fn
        let mut f1 = 0.0;
        for c in 0..3 {
            let tp = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
            let fp = truth.iter().zip(&pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
            let fn_ = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
            let prec = tp / (tp + fp);
            let rec = tp / (tp + fn_);
            f1 += 2.0 * prec * rec / (prec + rec);
        }
        assert!((macro_f1(&cm) - f1 / 3.0).abs() < 1e-12);
        assert!((accuracy(&cm) - 5.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(confusion_matrix(&[0], &[0, 1], 2).is_err());
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
        assert!(category_similarity_matrix(array![[1.0]].view(), &[3], 2).is_err());
    }
}
