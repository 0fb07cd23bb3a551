use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::ScoreMap;
use crate::error::{Error, Result};
use crate::tensorio::Tensor;

use crate::rng::derive_seed;

/// Memory bank of normal feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Coreset {
    dim: usize,
    /// Row-major `[M, dim]`.
    points: Vec<f64>,
    /// Index (in the training list) of the image each point came from.
    sources: Vec<usize>,
    index: KdTree,
}

/// k-d tree over the points, split on the widest coordinate at the median.
/// Subtrees whose splitting plane is farther than the current best are
/// skipped, which never changes the result of the search.
#[derive(Debug, Clone, PartialEq)]
struct KdTree {
    dim: usize,
    /// Points reordered so every node covers a contiguous range.
    points: Vec<f64>,
    sources: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

const LEAF_SIZE: usize = 12;

impl KdTree {
    fn build(dim: usize, points: &[f64], sources: &[usize]) -> Self {
        let mut order: Vec<usize> = (0..sources.len()).collect();
        let mut nodes = Vec::new();
        Self::split(dim, points, &mut order, 0, &mut nodes);
        KdTree {
            dim,
            points: order.iter().flat_map(|&i| points[i * dim..(i + 1) * dim].iter().copied()).collect(),
            sources: order.iter().map(|&i| sources[i]).collect(),
            nodes,
        }
    }

    fn split(dim: usize, points: &[f64], order: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        nodes.push(Node::Leaf { start: offset, end: offset + order.len() });
        if order.len() <= LEAF_SIZE {
            return id;
        }
        let coord = |i: usize, a: usize| points[i * dim + a];
        let axis = (0..dim)
            .map(|a| {
                let (lo, hi) = order.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(coord(i, a)), hi.max(coord(i, a)))
                });
                (a, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        order.sort_by(|&a, &b| coord(a, axis).total_cmp(&coord(b, axis)).then(a.cmp(&b)));
        let mid = order.len() / 2;
        let value = coord(order[mid], axis);
        let (lo, hi) = order.split_at_mut(mid);
        let left = Self::split(dim, points, lo, offset, nodes);
        let right = Self::split(dim, points, hi, offset + mid, nodes);
        nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Smallest squared distance from `x` to a point not from `exclude`.
    fn nearest_sq(&self, x: &[f64], exclude: Option<usize>) -> f64 {
        let mut best = f64::INFINITY;
        self.visit(0, x, exclude, &mut best);
        best
    }

    fn visit(&self, node: usize, x: &[f64], exclude: Option<usize>, best: &mut f64) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    if Some(self.sources[i]) == exclude {
                        continue;
                    }
                    let p = &self.points[i * self.dim..(i + 1) * self.dim];
                    let d2: f64 = x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d2 < *best {
                        *best = d2;
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                // Left holds coordinates <= value, right holds >= value.
                let gap = x[axis] - value;
                let (near, far) = if gap < 0.0 { (left, right) } else { (right, left) };
                self.visit(near, x, exclude, best);
                if gap * gap <= *best {
                    self.visit(far, x, exclude, best);
                }
            }
        }
    }
}

impl Coreset {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    /// `[M, dim]` tensor of the points.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), self.dim], self.points.clone())
    }

    /// Rebuilds a coreset from its points and sources.
    pub fn from_parts(points: &Tensor, sources: Vec<usize>) -> Result<Self> {
        match *points.shape() {
            [m, dim] if m == sources.len() && m > 0 => Ok(Coreset {
                dim,
                index: KdTree::build(dim, points.data(), &sources),
                points: points.data().to_vec(),
                sources,
            }),
            _ => Err(Error::DimMismatch(format!(
                "coreset points {:?} with {} sources",
                points.shape(),
                sources.len()
            ))),
        }
    }
}

fn feature_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h * w)),
        _ => Err(Error::DimMismatch(format!("features must be [C, H, W], got {:?}", t.shape()))),
    }
}

/// Samples `m_per_image` locations uniformly without replacement from every
/// training image. Image `i` uses its own stream derived from `(seed, i)`.
pub fn fit_coreset(train_features: &[&Tensor], m_per_image: usize, seed: u64) -> Result<Coreset> {
    if train_features.is_empty() {
        return Err(Error::Empty("coreset needs at least one training image".into()));
    }
    if m_per_image == 0 {
        return Err(Error::InvalidArgument("m_per_image must be >= 1".into()));
    }
    let (dim, _) = feature_dims(train_features[0])?;
    let mut points = Vec::new();
    let mut sources = Vec::new();
    for (i, t) in train_features.iter().enumerate() {
        let (c, n) = feature_dims(t)?;
        if c != dim {
            return Err(Error::DimMismatch(format!("image {i} has {c} channels, expected {dim}")));
        }
        if m_per_image > n {
            return Err(Error::InvalidArgument(format!(
                "m_per_image {m_per_image} exceeds {n} locations per image"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let mut picks = sample(&mut rng, n, m_per_image).into_vec();
        picks.sort_unstable();
        let data = t.data();
        for loc in picks {
            points.extend((0..dim).map(|ch| data[ch * n + loc]));
            sources.push(i);
        }
    }
    Ok(Coreset {
        dim,
        index: KdTree::build(dim, &points, &sources),
        points,
        sources,
    })
}

/// Per-location Euclidean distance to the nearest coreset point. Points
/// taken from training image `exclude` are skipped, which scores a training
/// image as if it had been held out.
pub fn score_knn(
    image_id: &str,
    features: &Tensor,
    coreset: &Coreset,
    exclude: Option<usize>,
) -> Result<ScoreMap> {
    let (c, n) = feature_dims(features)?;
    if c != coreset.dim {
        return Err(Error::DimMismatch(format!(
            "features have {c} channels, coreset has {}",
            coreset.dim
        )));
    }
    let (h, w) = (features.shape()[1], features.shape()[2]);
    let data = features.data();
    if coreset.sources.iter().all(|&s| Some(s) == exclude) {
        return Err(Error::Empty("no coreset points left after exclusion".into()));
    }
    let mut x = vec![0.0; c];
    let mut scores = Vec::with_capacity(n);
    for loc in 0..n {
        for (ch, v) in x.iter_mut().enumerate() {
            *v = data[ch * n + loc];
        }
        scores.push(coreset.index.nearest_sq(&x, exclude).sqrt());
    }
    ScoreMap::from_pixels(image_id, h, w, scores)
}
