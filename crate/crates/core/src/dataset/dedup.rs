use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use image::imageops::FilterType;
use image::DynamicImage;
use serde::{Deserialize, Serialize};

use super::DatasetWarning;

/// 64-bit difference hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PerceptualHash(pub u64);

impl PerceptualHash {
    pub fn distance(&self, other: &PerceptualHash) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

impl fmt::Display for PerceptualHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// dHash: grayscale, downscale to 9x8, one bit per horizontally adjacent pair
/// (set when the left pixel is darker than the right).
pub fn dhash(img: &DynamicImage) -> PerceptualHash {
    let small = img.to_luma8();
    let small = image::imageops::resize(&small, 9, 8, FilterType::Triangle);
    let mut bits = 0u64;
    for y in 0..8 {
        for x in 0..8 {
            let l = small.get_pixel(x, y)[0];
            let r = small.get_pixel(x + 1, y)[0];
            bits = (bits << 1) | u64::from(l < r);
        }
    }
    PerceptualHash(bits)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateCluster {
    /// Lexicographically smallest member name.
    pub representative: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub clusters: Vec<DuplicateCluster>,
    pub hashes: BTreeMap<String, PerceptualHash>,
    pub warnings: Vec<DatasetWarning>,
}

impl DedupReport {
    pub fn representatives(&self) -> Vec<&str> {
        self.clusters.iter().map(|c| c.representative.as_str()).collect()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Clusters named images whose hashes differ by at most `max_hamming` bits
/// (transitively). Undecodable inputs are skipped with a warning.
pub fn dedup_images(images: &[(String, Vec<u8>)], max_hamming: u32) -> DedupReport {
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(8);
    let chunk = images.len().div_ceil(workers).max(1);
    let results: Vec<(String, Result<PerceptualHash, String>)> = std::thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|(name, bytes)| {
                            let h = image::load_from_memory(bytes)
                                .map(|img| dhash(&img))
                                .map_err(|e| e.to_string());
                            (name.clone(), h)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("hash worker panicked"))
            .collect()
    });

    let mut report = DedupReport::default();
    for (name, h) in results {
        match h {
            Ok(h) => {
                report.hashes.insert(name, h);
            }
            Err(reason) => {
                tracing::warn!(%name, %reason, "skipping undecodable image");
                report.warnings.push(DatasetWarning::SkippedImage { path: name, reason });
            }
        }
    }
    report.warnings.sort_by_key(|w| match w {
        DatasetWarning::SkippedImage { path, .. } => path.clone(),
        _ => String::new(),
    });

    // BTreeMap order makes the result independent of input order.
    let names: Vec<&String> = report.hashes.keys().collect();
    let hashes: Vec<PerceptualHash> = report.hashes.values().copied().collect();
    let mut parent: Vec<usize> = (0..names.len()).collect();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            if hashes[i].distance(&hashes[j]) <= max_hamming {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, n) in names.iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push((*n).clone());
    }
    report.clusters = groups
        .into_values()
        .map(|members| DuplicateCluster {
            representative: members[0].clone(),
            members,
        })
        .collect();
    report
}

pub fn dedup_files(paths: &[PathBuf], max_hamming: u32) -> DedupReport {
    let mut loaded = Vec::new();
    let mut unreadable = Vec::new();
    for p in paths {
        let name = p.to_string_lossy().into_owned();
        match std::fs::read(p) {
            Ok(b) => loaded.push((name, b)),
            Err(e) => unreadable.push(DatasetWarning::SkippedImage {
                path: name,
                reason: e.to_string(),
            }),
        }
    }
    let mut report = dedup_images(&loaded, max_hamming);
    report.warnings.extend(unreadable);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Rgb};
    use rand::{Rng, SeedableRng};

    fn encode(img: &DynamicImage) -> Vec<u8> {
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        buf.into_inner()
    }

    fn scene(shift: f64) -> DynamicImage {
        // Smooth blobs stand in for a photographed scene.
        let img = ImageBuffer::from_fn(128, 96, |x, y| {
            let fx = x as f64 / 128.0;
            let fy = y as f64 / 96.0;
            let v = 110.0
                + 60.0 * (fx * 7.0).sin() * (fy * 5.0).cos()
                + 40.0 * ((fx + fy) * 11.0).sin();
            let v = (v * (1.0 + shift)).clamp(0.0, 255.0) as u8;
            Rgb([v, v.saturating_add(10), v.saturating_sub(10)])
        });
        DynamicImage::ImageRgb8(img)
    }

    fn noise(seed: u64) -> DynamicImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DynamicImage::ImageRgb8(ImageBuffer::from_fn(64, 64, |_, _| {
            Rgb([rng.random(), rng.random(), rng.random()])
        }))
    }

    #[test]
    fn identical_copies_cluster() {
        let bytes = encode(&scene(0.0));
        let r = dedup_images(&[("a".into(), bytes.clone()), ("b".into(), bytes)], 0);
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.hashes["a"].distance(&r.hashes["b"]), 0);
    }

    #[test]
    fn brightness_shift_stays_close() {
        let a = dhash(&scene(0.0));
        let b = dhash(&scene(0.01));
        assert!(a.distance(&b) <= 8, "distance {}", a.distance(&b));
        let r = dedup_images(
            &[("a".into(), encode(&scene(0.0))), ("b".into(), encode(&scene(0.01)))],
            8,
        );
        assert_eq!(r.clusters.len(), 1);
    }

    #[test]
    fn unrelated_noise_is_far() {
        let dists: Vec<u32> = (0..20)
            .map(|i| dhash(&noise(2 * i)).distance(&dhash(&noise(2 * i + 1))))
            .collect();
        let mean = dists.iter().sum::<u32>() as f64 / dists.len() as f64;
        assert!((24.0..=40.0).contains(&mean), "mean distance {mean}");
        let r = dedup_images(
            &[("a".into(), encode(&noise(1))), ("b".into(), encode(&noise(2)))],
            8,
        );
        assert_eq!(r.clusters.len(), 2);
    }

    #[test]
    fn undecodable_skipped_and_order_free() {
        let imgs = vec![
            ("x".to_string(), encode(&scene(0.0))),
            ("junk".to_string(), b"not an image".to_vec()),
            ("y".to_string(), encode(&noise(3))),
            ("w".to_string(), encode(&scene(0.0))),
        ];
        let a = dedup_images(&imgs, 8);
        let mut rev = imgs.clone();
        rev.reverse();
        let b = dedup_images(&rev, 8);
        assert_eq!(a, b);
        assert_eq!(a.warnings.len(), 1);
        assert_eq!(a.representatives(), vec!["w", "y"]);
    }
}
