//! Binary masks: 8-connected components, disc dilation and Zhang–Suen
//! thinning.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// From an `[H, W]` tensor holding only 0 and 1.
    pub fn from_binary(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("mask must be [H, W], got {s:?}")));
        }
        if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!("mask value {v} is not binary")));
        }
        Ok(Mask {
            height: s[0],
            width: s[1],
            data: t.data().iter().map(|&v| v == 1.0).collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn get(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.data[y as usize * self.width + x as usize]
    }
}

/// Labels 8-connected foreground components `1..=n` in raster order of
/// their first pixel; background is 0. Returns the labels and `n`.
pub fn label_components(m: &Mask) -> (Vec<u32>, usize) {
    let (h, w) = (m.height, m.width);
    let mut labels = vec![0u32; h * w];
    let mut n = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !m.data[start] || labels[start] != 0 {
            continue;
        }
        n += 1;
        labels[start] = n;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if m.get(ny, nx) {
                        let q = ny as usize * w + nx as usize;
                        if labels[q] == 0 {
                            labels[q] = n;
                            stack.push(q);
                        }
                    }
                }
            }
        }
    }
    (labels, n as usize)
}

pub fn count_components(m: &Mask) -> usize {
    label_components(m).1
}

/// Dilation by the disc `{(dy, dx) : dy² + dx² ≤ r²}`.
pub fn dilate_disc(m: &Mask, radius: usize) -> Mask {
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = Mask::empty(m.height, m.width);
    for y in 0..m.height as isize {
        for x in 0..m.width as isize {
            out.data[y as usize * m.width + x as usize] =
                offsets.iter().any(|&(dy, dx)| m.get(y - dy, x - dx));
        }
    }
    out
}

/// Zhang–Suen thinning. Each pass has two parallel subiterations; a pixel
/// is deleted when it has 2–6 foreground neighbours, exactly one 0→1
/// transition around its ring, and the subiteration's two triple products
/// vanish. Pixels outside the frame are background.
pub fn skeletonize(m: &Mask) -> Mask {
    let mut cur = m.clone();
    let mut kill = Vec::new();
    loop {
        let mut changed = false;
        for step in 0..2 {
            kill.clear();
            for y in 0..cur.height as isize {
                for x in 0..cur.width as isize {
                    if !cur.get(y, x) {
                        continue;
                    }
                    // p2..p9, clockwise from north.
                    let ring = [
                        cur.get(y - 1, x),
                        cur.get(y - 1, x + 1),
                        cur.get(y, x + 1),
                        cur.get(y + 1, x + 1),
                        cur.get(y + 1, x),
                        cur.get(y + 1, x - 1),
                        cur.get(y, x - 1),
                        cur.get(y - 1, x - 1),
                    ];
                    let b = ring.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !ring[i] && ring[(i + 1) % 8]).count();
                    if !(2..=6).contains(&b) || a != 1 {
                        continue;
                    }
                    let [p2, _, p4, _, p6, _, p8, _] = ring;
                    let keep = if step == 0 {
                        (p2 && p4 && p6) || (p4 && p6 && p8)
                    } else {
                        (p2 && p4 && p8) || (p2 && p6 && p8)
                    };
                    if !keep {
                        kill.push(y as usize * cur.width + x as usize);
                    }
                }
            }
            changed |= !kill.is_empty();
            for &p in &kill {
                cur.data[p] = false;
            }
        }
        if !changed {
            return cur;
        }
    }
}
