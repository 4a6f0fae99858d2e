//! Label overlap and topology statistics for evaluating registrations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::jacobian_determinant;
use crate::real::Real;
use crate::volume::{par_fill_indexed, Dims, VectorField};

/// Integer segmentation; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn from_vec(dims: Dims, data: Vec<u16>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::LengthMismatch {
                dims,
                expected: dims.len(),
                found: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, label: u16) -> Self {
        Self {
            dims,
            data: vec![label; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> u16 + Sync) -> Self {
        Self {
            dims,
            data: crate::volume::par_fill(dims, f),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Voxel count per label, background included.
    pub fn histogram(&self) -> BTreeMap<u16, usize> {
        let mut h = BTreeMap::new();
        for &l in &self.data {
            *h.entry(l).or_insert(0) += 1;
        }
        h
    }
}

/// Nearest-neighbour resampling at `x + disp(x)`, clamped to the grid.
pub fn warp_labels<T: Real>(lab: &LabelVolume, disp: &VectorField<T>) -> Result<LabelVolume> {
    lab.dims.ensure_same(&disp.dims())?;
    let dims = lab.dims;
    let n = dims.as_array();
    let data = par_fill_indexed(dims, |i, x, y, z| {
        let u = disp.at(i);
        let c = [x, y, z];
        let p = [0, 1, 2].map(|a| {
            let q = (T::from_usize_lossy(c[a]) + u[a]).round();
            let hi = T::from_usize_lossy(n[a] - 1);
            q.max(T::zero()).min(hi).to_usize().unwrap_or(0)
        });
        lab.get(p[0], p[1], p[2])
    });
    Ok(LabelVolume { dims, data })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_label: BTreeMap<u16, f64>,
    pub avg_dsc: f64,
    pub std_dsc: f64,
}

/// Per-label Dice over labels > 0 present in either volume; mean and
/// population standard deviation across those labels.
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<DiceReport> {
    a.dims.ensure_same(&b.dims)?;
    // label -> (|a|, |b|, |a ∩ b|)
    let mut counts: BTreeMap<u16, (usize, usize, usize)> = BTreeMap::new();
    for (&la, &lb) in a.data.iter().zip(&b.data) {
        if la != 0 {
            counts.entry(la).or_default().0 += 1;
        }
        if lb != 0 {
            counts.entry(lb).or_default().1 += 1;
        }
        if la != 0 && la == lb {
            counts.entry(la).or_default().2 += 1;
        }
    }
    let per_label: BTreeMap<u16, f64> = counts
        .into_iter()
        .map(|(l, (na, nb, both))| (l, 2.0 * both as f64 / (na + nb) as f64))
        .collect();
    let (avg_dsc, std_dsc) = mean_std(per_label.values().copied());
    Ok(DiceReport {
        per_label,
        avg_dsc,
        std_dsc,
    })
}

fn mean_std(vals: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = vals.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = vals.clone().sum::<f64>() / n as f64;
    let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    #[serde(rename = "nonpositive_count")]
    pub count_nonpositive: usize,
    #[serde(rename = "nonpositive_pct")]
    pub pct_nonpositive: f64,
    pub det_min: f64,
    pub det_max: f64,
}

/// Counts voxels with `det(I + grad u) <= 0`.
pub fn jacobian_report<T: Real>(disp: &VectorField<T>) -> Result<JacobianReport> {
    let det = jacobian_determinant(disp)?;
    let mut count = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &d in det.data() {
        let d = d.to_f64_lossy();
        if d <= 0.0 {
            count += 1;
        }
        lo = lo.min(d);
        hi = hi.max(d);
    }
    Ok(JacobianReport {
        count_nonpositive: count,
        pct_nonpositive: 100.0 * count as f64 / det.data().len() as f64,
        det_min: lo,
        det_max: hi,
    })
}

/// JSON report combining the optional Dice and Jacobian sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub dice: Option<DiceReport>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub jacobian: Option<JacobianReport>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume;

    fn d() -> Dims {
        Dims::new(6, 5, 4).unwrap()
    }

    fn three_labels() -> LabelVolume {
        LabelVolume::from_fn(d(), |x, y, _| ((x + y) % 4) as u16)
    }

    #[test]
    fn dice_identical() {
        let a = three_labels();
        let r = dice(&a, &a).unwrap();
        assert_eq!(r.per_label.len(), 3);
        assert!(r.per_label.values().all(|&v| v == 1.0));
        assert_eq!((r.avg_dsc, r.std_dsc), (1.0, 0.0));
    }

    #[test]
    fn dice_disjoint_and_half() {
        let a = LabelVolume::from_fn(d(), |x, _, _| (x == 0) as u16);
        let b = LabelVolume::from_fn(d(), |x, _, _| (x == 1) as u16);
        assert_eq!(dice(&a, &b).unwrap().per_label[&1], 0.0);

        let dims = Dims::new(6, 1, 1).unwrap();
        let a = LabelVolume::from_vec(dims, vec![1, 1, 1, 1, 0, 0]).unwrap();
        let b = LabelVolume::from_vec(dims, vec![0, 0, 1, 1, 1, 1]).unwrap();
        let r = dice(&a, &b).unwrap();
        assert_eq!(r.per_label[&1], 0.5);
        assert_eq!(dice(&b, &a).unwrap(), r);
    }

    #[test]
    fn dice_excludes_absent_labels() {
        let dims = Dims::new(4, 1, 1).unwrap();
        let a = LabelVolume::from_vec(dims, vec![0, 2, 2, 5]).unwrap();
        let b = LabelVolume::from_vec(dims, vec![0, 2, 2, 0]).unwrap();
        let r = dice(&a, &b).unwrap();
        assert_eq!(r.per_label.keys().copied().collect::<Vec<_>>(), vec![2, 5]);
        assert_eq!(r.avg_dsc, 0.5);
        assert_eq!(r.std_dsc, 0.5);
        let empty = LabelVolume::filled(dims, 0);
        assert_eq!(dice(&empty, &empty).unwrap().avg_dsc, 0.0);
        assert!(dice(&a, &LabelVolume::filled(d(), 0)).is_err());
    }

    #[test]
    fn warp_labels_identity_and_shift() {
        let a = three_labels();
        assert_eq!(warp_labels(&a, &VectorField::<f64>::zeros(d())).unwrap(), a);
        let s = warp_labels(&a, &VectorField::constant(d(), [1.0, 0.0, 0.0])).unwrap();
        for z in 0..4 {
            for y in 0..5 {
                for x in 0..6 {
                    assert_eq!(s.get(x, y, z), a.get((x + 1).min(5), y, z));
                }
            }
        }
    }

    #[test]
    fn jacobian_report_examples() {
        let r = jacobian_report(&VectorField::<f64>::zeros(d())).unwrap();
        assert_eq!((r.count_nonpositive, r.pct_nonpositive, r.det_min, r.det_max), (0, 0.0, 1.0, 1.0));

        let dims = Dims::cube(6).unwrap();
        let scale = VectorField::from_fn(dims, |x, y, z| [x as f64, y as f64, z as f64]).unwrap();
        let r = jacobian_report(&scale).unwrap();
        assert_eq!(r.count_nonpositive, 0);
        assert!((r.det_min - 8.0).abs() < 1e-12);

        // A fold confined to the slab x = 3: central difference of u_x is -2 there only.
        let dims = Dims::new(8, 6, 6).unwrap();
        let profile = [0.0, 0.0, 0.0, -1.5, -4.0, -3.0, -3.0, -3.0];
        let ux = Volume::from_fn(dims, |x, _, _| profile[x]).unwrap();
        let fold = VectorField::from_components([ux, Volume::zeros(dims), Volume::zeros(dims)]).unwrap();
        let det = jacobian_determinant(&fold).unwrap();
        assert_eq!(det.get(3, 2, 2), -1.0);
        let r = jacobian_report(&fold).unwrap();
        assert_eq!(r.count_nonpositive, 36);
        assert!((r.pct_nonpositive - 100.0 * 36.0 / 288.0).abs() < 1e-12);
        assert_eq!(r.det_min, -1.0);
    }

    #[test]
    fn report_json_keys() {
        let a = three_labels();
        let rep = EvalReport {
            dice: Some(dice(&a, &a).unwrap()),
            jacobian: Some(jacobian_report(&VectorField::<f64>::zeros(d())).unwrap()),
        };
        let v = serde_json::to_value(&rep).unwrap();
        for k in ["per_label", "avg_dsc", "std_dsc", "nonpositive_count", "nonpositive_pct", "det_min", "det_max"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        let empty = serde_json::to_value(EvalReport::default()).unwrap();
        assert_eq!(empty, serde_json::json!({}));
    }
}
