//! Embedding inspection: PCA of criterion embeddings and cosine neighbours
//! in the bigram table.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::corpus::RESERVED;
use crate::model::Model;
use crate::numeric::Tensor;
use crate::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// Projects the rows of `points` onto their top two principal axes after
/// mean-centring.
///
/// The eigenproblem is solved on the `M x M` Gram matrix or the `d x d`
/// covariance, whichever is smaller. Each axis is oriented so that its first
/// non-negligible component is positive. Axes with zero variance give zero
/// coordinates.
pub fn pca_2d(names: &[String], points: &Tensor) -> Result<Vec<Projection>, Error> {
    let (m, d) = (points.rows(), points.cols());
    if m < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 points, got {m}")));
    }
    if names.len() != m {
        return Err(Error::Config(format!("{} names for {m} points", names.len())));
    }
    let mut x = DMatrix::from_row_slice(m, d, points.data());
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let scale = x.amax().max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale * scale * (m.max(d) as f64);

    let mut axes: Vec<DVector<f64>> = Vec::with_capacity(2);
    if m <= d {
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        for (lambda, u) in sorted_pairs(&eig).into_iter().take(2) {
            axes.push(if lambda > tol {
                x.transpose() * u / lambda.sqrt()
            } else {
                DVector::zeros(d)
            });
        }
    } else {
        let cov = x.transpose() * &x;
        let eig = SymmetricEigen::new(cov);
        for (lambda, v) in sorted_pairs(&eig).into_iter().take(2) {
            axes.push(if lambda > tol { v } else { DVector::zeros(d) });
        }
    }
    while axes.len() < 2 {
        axes.push(DVector::zeros(d));
    }
    for axis in &mut axes {
        let limit = 1e-9 * axis.amax();
        if let Some(first) = axis.iter().copied().find(|v| v.abs() > limit) {
            if first < 0.0 {
                *axis = -axis.clone();
            }
        }
    }
    let coords = &x * DMatrix::from_columns(&axes);
    Ok(names
        .iter()
        .enumerate()
        .map(|(i, name)| Projection {
            name: name.clone(),
            x: coords[(i, 0)],
            y: coords[(i, 1)],
        })
        .collect())
}

fn sorted_pairs(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> Vec<(f64, DVector<f64>)> {
    let mut pairs: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .zip(eig.eigenvectors.column_iter())
        .map(|(&l, v)| (l, v.into_owned()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// PCA of the model's criterion embeddings, one row per criterion.
pub fn criterion_projection(model: &Model) -> Result<Vec<Projection>, Error> {
    let table = model.params.get(model.embedding_params().criterion);
    pca_2d(model.vocab.criterion_names(), table)
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub symbol: String,
    pub similarity: f64,
}

/// The `k` rows most cosine-similar to row `query`, excluding the query
/// itself and the rows listed in `skip`. Ties keep table order.
pub fn nearest_rows(table: &Tensor, symbols: &[String], query: usize, k: usize, skip: &[usize]) -> Vec<Neighbor> {
    let q = table.row(query);
    let mut scored: Vec<(usize, f64)> = (0..table.rows())
        .filter(|&i| i != query && !skip.contains(&i))
        .map(|i| (i, cosine(q, table.row(i))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(k)
        .map(|(i, s)| Neighbor {
            symbol: symbols[i].clone(),
            similarity: s,
        })
        .collect()
}

/// Nearest neighbours of a bigram (its two tokens written together) in the
/// learned bigram table. Reserved symbols are never returned.
pub fn nearest_bigrams(model: &Model, query: &str, k: usize) -> Result<Vec<Neighbor>, Error> {
    let bigrams = &model.vocab.bigrams;
    let index = bigrams
        .get(query)
        .filter(|&i| i >= RESERVED.len())
        .ok_or_else(|| Error::UnknownBigram(query.to_string()))?;
    let table = model.params.get(model.embedding_params().bigram);
    let skip: Vec<usize> = (0..RESERVED.len()).collect();
    Ok(nearest_rows(table, bigrams.symbols(), index, k, &skip))
}
