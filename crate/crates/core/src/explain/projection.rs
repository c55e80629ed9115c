use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::retrieval::SupportStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointKind {
    Support,
    Query,
}

impl PointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PointKind::Support => "support",
            PointKind::Query => "query",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPoint {
    pub id: String,
    pub embedding: Vec<f64>,
    /// Predicted (or known) label.
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub label: Label,
    pub kind: PointKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub points: Vec<ProjectedPoint>,
    /// Fraction of total variance along each of the two axes.
    pub explained_variance: [f64; 2],
}

impl Projection {
    /// `id,x,y,label,kind` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,x,y,label,kind\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{},{},{}\n", p.id, p.x, p.y, p.label, p.kind.as_str()));
        }
        s
    }
}

/// Two-component PCA of raw points (`n × d`). The sign of each component is
/// chosen so that its largest-magnitude loading is positive (the first such
/// loading on ties).
pub fn pca_2d(points: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    let n = points.len();
    if n < 3 {
        return Err(Error::TooFewPoints(n));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("projection points differ in dimension".into()));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let total: f64 = x.iter().map(|v| v * v).sum();
    if total <= f64::EPSILON * f64::EPSILON || !total.is_finite() {
        return Err(Error::ZeroVariance);
    }
    // Eigenvectors of the d × d scatter matrix are the principal axes.
    let scatter = x.transpose() * &x;
    let eig = scatter.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(2);
    let mut explained = [0.0; 2];
    for c in 0..2 {
        if c >= d {
            axes.push(vec![0.0; d]);
            continue;
        }
        let k = order[c];
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let mut best = 0;
        for (i, val) in v.iter().enumerate() {
            if val.abs() > v[best].abs() + 1e-12 {
                best = i;
            }
        }
        if v[best] < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        explained[c] = (eig.eigenvalues[k] / total).clamp(0.0, 1.0);
        axes.push(v);
    }
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let proj = |a: &[f64]| row.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect();
    Ok((coords, explained))
}

/// Projects the support embeddings together with `queries`.
pub fn project_embeddings(store: &SupportStore, queries: &[QueryPoint]) -> Result<Projection> {
    let mut pts: Vec<Vec<f64>> =
        (0..store.len()).map(|i| store.row(i).iter().map(|&v| f64::from(v)).collect()).collect();
    pts.extend(queries.iter().map(|q| q.embedding.clone()));
    let (coords, explained_variance) = pca_2d(&pts)?;
    let meta = store
        .ids()
        .iter()
        .zip(store.labels())
        .map(|(id, &l)| (id.clone(), l, PointKind::Support))
        .chain(queries.iter().map(|q| (q.id.clone(), q.label, PointKind::Query)));
    let points = meta.zip(coords).map(|((id, label, kind), [x, y])| ProjectedPoint { id, x, y, label, kind }).collect();
    Ok(Projection { points, explained_variance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_points() -> Vec<Vec<f64>> {
        let (u, v) = ([1.0, 2.0, 0.0, -1.0, 0.5], [0.0, 1.0, 3.0, 1.0, -2.0]);
        (0..12)
            .map(|i| {
                let (a, b) = ((i as f64 * 0.7).sin() * 3.0, (i as f64 * 1.3).cos());
                (0..5).map(|j| 4.0 + a * u[j] + b * v[j]).collect()
            })
            .collect()
    }

    #[test]
    fn planar_points_are_fully_explained_and_centred() {
        let (coords, ev) = pca_2d(&plane_points()).unwrap();
        assert!((ev[0] + ev[1] - 1.0).abs() < 1e-9);
        assert!(ev[0] >= ev[1]);
        for c in 0..2 {
            assert!(coords.iter().map(|p| p[c]).sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn duplicates_coincide_and_order_does_not_matter() {
        let mut pts = plane_points();
        pts.push(pts[3].clone());
        let (coords, _) = pca_2d(&pts).unwrap();
        assert_eq!(coords[3], coords[12]);
        let mut rev = pts.clone();
        rev.reverse();
        let (back, _) = pca_2d(&rev).unwrap();
        for (a, b) in coords.iter().zip(back.iter().rev()) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert!(matches!(pca_2d(&[vec![1.0], vec![2.0]]), Err(Error::TooFewPoints(2))));
        assert!(matches!(pca_2d(&vec![vec![1.0, 2.0]; 4]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn store_and_queries_become_csv_rows() {
        let store = SupportStore::new(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]],
            vec![Label::Infected, Label::Uninfected, Label::Infected],
            vec!["a".into(), "b".into(), "c".into()],
            "h",
        )
        .unwrap();
        let q = QueryPoint { id: "q".into(), embedding: vec![1.0, 1.0], label: Label::Uninfected };
        let p = project_embeddings(&store, &[q]).unwrap();
        let csv = p.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "id,x,y,label,kind");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("q,") && lines[4].ends_with(",uninfected,query"));
    }
}
