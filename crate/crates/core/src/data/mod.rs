//! Datasets: deterministic synthetic scenes and on-disk image folders.

mod folder;
mod synth;

pub use folder::{load_image_folder, FolderConfig};
pub use synth::{
    generate_classification_pair, generate_dense_pair, render_dense_scene, PlacedShape, ShapeKind,
    SyntheticSceneConfig, PALETTE,
};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::tensor::Tensor;

/// Labels of one task for every sample of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// One class index per sample.
    Class(Vec<u32>),
    /// One class index per pixel, row-major over (N, H, W).
    Mask { labels: Vec<u32>, height: usize, width: usize },
    /// Dense real-valued targets of shape [N, C, H, W].
    Dense(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Mask { labels, height, width } => labels.len() / (height * width),
            Labels::Dense(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(indices.iter().map(|&i| v[i]).collect()),
            Labels::Mask { labels, height, width } => {
                let plane = height * width;
                let mut out = Vec::with_capacity(indices.len() * plane);
                for &i in indices {
                    out.extend_from_slice(&labels[i * plane..(i + 1) * plane]);
                }
                Labels::Mask {
                    labels: out,
                    height: *height,
                    width: *width,
                }
            }
            Labels::Dense(t) => Labels::Dense(Tensor::cat_batch(&indices.iter().map(|&i| t.sample(i)).collect::<Vec<_>>())),
        }
    }

    /// Mirrors spatial labels left to right; per-sample classes are unchanged.
    pub fn flip_horizontal(&self) -> Labels {
        match self {
            Labels::Class(_) => self.clone(),
            Labels::Mask { labels, height, width } => Labels::Mask {
                labels: labels
                    .chunks(*width)
                    .flat_map(|row| row.iter().rev().copied())
                    .collect(),
                height: *height,
                width: *width,
            },
            Labels::Dense(t) => Labels::Dense(t.flip_last()),
        }
    }

    pub fn as_class(&self) -> Option<&[u32]> {
        match self {
            Labels::Class(v) => Some(v),
            _ => None,
        }
    }

    /// Class indices for classification or segmentation targets.
    pub fn as_indices(&self) -> Option<&[u32]> {
        match self {
            Labels::Class(v) | Labels::Mask { labels: v, .. } => Some(v),
            Labels::Dense(_) => None,
        }
    }

    pub fn as_dense(&self) -> Option<&Tensor> {
        match self {
            Labels::Dense(t) => Some(t),
            _ => None,
        }
    }
}

/// Images with one label set per named task.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// [N, C, H, W] in the normalized input space.
    pub images: Tensor,
    pub tasks: Vec<(String, Labels)>,
}

/// A mini-batch drawn from a [`Dataset`].
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<Labels>,
    pub indices: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (C, H, W) of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn task(&self, name: &str) -> Option<&Labels> {
        self.tasks.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|(n, _)| n == name)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let images = Tensor::cat_batch(&indices.iter().map(|&i| self.images.sample(i)).collect::<Vec<_>>());
        Batch {
            images,
            labels: self.tasks.iter().map(|(_, l)| l.select(indices)).collect(),
            indices: indices.to_vec(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            images: b.images,
            tasks: self.tasks.iter().map(|(n, _)| n.clone()).zip(b.labels).collect(),
        }
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Without-replacement shuffled batches covering the dataset once. A
    /// trailing partial batch is kept.
    pub fn epoch_batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Sequential batches in dataset order.
    pub fn ordered_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flips each sample with probability one half, together with its spatial labels.
    pub fn random_hflip<R: Rng + ?Sized>(mut self, rng: &mut R) -> Batch {
        let flips: Vec<bool> = (0..self.len()).map(|_| rng.random_bool(0.5)).collect();
        if !flips.iter().any(|&f| f) {
            return self;
        }
        let images: Vec<Tensor> = (0..self.len())
            .map(|i| {
                let s = self.images.sample(i);
                if flips[i] {
                    s.flip_last()
                } else {
                    s
                }
            })
            .collect();
        self.images = Tensor::cat_batch(&images);
        self.labels = self
            .labels
            .iter()
            .map(|l| {
                let parts: Vec<Labels> = (0..flips.len())
                    .map(|i| {
                        let one = l.select(&[i]);
                        if flips[i] {
                            one.flip_horizontal()
                        } else {
                            one
                        }
                    })
                    .collect();
                concat_labels(&parts)
            })
            .collect();
        self
    }
}

fn concat_labels(parts: &[Labels]) -> Labels {
    match &parts[0] {
        Labels::Class(_) => Labels::Class(parts.iter().flat_map(|p| p.as_class().unwrap().to_vec()).collect()),
        Labels::Mask { height, width, .. } => Labels::Mask {
            labels: parts.iter().flat_map(|p| p.as_indices().unwrap().to_vec()).collect(),
            height: *height,
            width: *width,
        },
        Labels::Dense(_) => Labels::Dense(Tensor::cat_batch(
            &parts.iter().map(|p| p.as_dense().unwrap().clone()).collect::<Vec<_>>(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Dataset {
        let images = Tensor::new([3, 1, 1, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        Dataset {
            images,
            tasks: vec![
                ("c".into(), Labels::Class(vec![0, 1, 2])),
                (
                    "m".into(),
                    Labels::Mask {
                        labels: vec![0, 1, 1, 0, 2, 2],
                        height: 1,
                        width: 2,
                    },
                ),
            ],
        }
    }

    #[test]
    fn batches_select_matching_rows() {
        let b = toy().batch(&[2, 0]);
        assert_eq!(b.images.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(b.labels[0].as_class().unwrap(), &[2, 0]);
        assert_eq!(b.labels[1].as_indices().unwrap(), &[2, 2, 0, 1]);
    }

    #[test]
    fn epoch_covers_every_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all: Vec<usize> = toy().epoch_batches(2, &mut rng).concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn flip_moves_images_and_masks_together() {
        let b = toy().batch(&[0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = b.clone().random_hflip(&mut rng);
        for i in 0..3 {
            let img = f.images.sample(i);
            let flipped = img.data() != b.images.sample(i).data();
            let mask = &f.labels[1].as_indices().unwrap()[i * 2..i * 2 + 2];
            let orig = &b.labels[1].as_indices().unwrap()[i * 2..i * 2 + 2];
            if flipped {
                assert_eq!(mask, &[orig[1], orig[0]]);
            } else {
                assert_eq!(mask, orig);
            }
        }
        assert_eq!(f.labels[0], b.labels[0]);
    }
}
