//! Training objectives recorded on the autograd graph: masked reconstruction
//! losses for both branches, the rigid contact map of the predicted object
//! motion, and the contact consistency penalty between the two.

use std::rc::Rc;

use hoi_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Added under the square root when normalizing rotation columns.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_o: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_h: 1.0, lambda_o: 1.0, lambda_c: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_h", self.lambda_h), ("lambda_o", self.lambda_o), ("lambda_c", self.lambda_c)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// The three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub human: Var,
    pub object: Var,
    pub consistency: Var,
    pub all: Var,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            human: g.value(self.human).item(),
            object: g.value(self.object).item(),
            consistency: g.value(self.consistency).item(),
            all: g.value(self.all).item(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub human: f64,
    pub object: f64,
    pub consistency: f64,
    pub all: f64,
}

impl LossValues {
    pub fn add(&mut self, other: &LossValues) {
        self.human += other.human;
        self.object += other.object;
        self.consistency += other.consistency;
        self.all += other.all;
    }

    pub fn scaled(&self, s: f64) -> LossValues {
        LossValues { human: self.human * s, object: self.object * s, consistency: self.consistency * s, all: self.all * s }
    }
}

fn check_shape(context: &'static str, g: &Graph, v: Var, t: &Tensor) -> Result<()> {
    if g.shape(v) != t.shape() {
        return Err(Error::shape(context, format!("{:?}", t.shape()), format!("{:?}", g.shape(v))));
    }
    Ok(())
}

/// `Σ mask ⊙ (pred − target)² / Σ mask`; a constant zero when the mask is
/// empty. Target entries under a zero mask never influence value or
/// gradient.
pub fn masked_mse(g: &mut Graph, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    check_shape("masked_mse target", g, pred, target)?;
    check_shape("masked_mse mask", g, pred, mask)?;
    let count = mask.sum();
    if count == 0.0 {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let masked_target = target.zip_map(mask, |t, m| if m == 0.0 { 0.0 } else { t });
    let tgt = g.input(masked_target);
    let m = g.input(mask.clone());
    let d = g.sub(pred, tgt);
    let d = g.mul(d, m);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / count))
}

/// Mean squared error over every entry.
pub fn mse(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    check_shape("mse target", g, pred, target)?;
    let tgt = g.input(target.clone());
    let d = g.sub(pred, tgt);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / target.len() as f64))
}

fn normalize_rows(g: &mut Graph, v: Var) -> Var {
    let sq = g.mul(v, v);
    let n2 = g.row_sum(sq);
    let n2 = g.add_scalar(n2, NORM_EPS);
    let n = g.sqrt(n2);
    let inv = g.recip(n);
    g.mul_col(v, inv)
}

/// Gram-Schmidt decoding of `T × 6` rotations into the three `T × 3`
/// matrix columns.
pub fn rotation_columns(g: &mut Graph, rot6d: Var) -> (Var, Var, Var) {
    let a = g.slice_cols(rot6d, 0, 3);
    let b = g.slice_cols(rot6d, 3, 3);
    let e1 = normalize_rows(g, a);
    let eb = g.mul(e1, b);
    let dot = g.row_sum(eb);
    let proj = g.mul_col(e1, dot);
    let u = g.sub(b, proj);
    let e2 = normalize_rows(g, u);
    let yzx: Rc<[usize]> = Rc::from([1, 2, 0].as_slice());
    let zxy: Rc<[usize]> = Rc::from([2, 0, 1].as_slice());
    let a1 = g.gather_cols(e1, yzx.clone());
    let b1 = g.gather_cols(e2, zxy.clone());
    let a2 = g.gather_cols(e1, zxy);
    let b2 = g.gather_cols(e2, yzx);
    let p1 = g.mul(a1, b1);
    let p2 = g.mul(a2, b2);
    let e3 = g.sub(p1, p2);
    (e1, e2, e3)
}

/// `R̂ p + L̂` for every rest-pose point `p` and every frame of the `T × 9`
/// object prediction. Returns `T × 3P`, point-major.
pub fn rigid_contacts(g: &mut Graph, object_pred: Var, rest: &[Vec3]) -> Result<Var> {
    let (_, cols) = g.shape(object_pred);
    if cols != 9 {
        return Err(Error::shape("object prediction width", 9, cols));
    }
    let p = rest.len();
    let centroid = g.slice_cols(object_pred, 0, 3);
    let rot = g.slice_cols(object_pred, 3, 6);
    let (e1, e2, e3) = rotation_columns(g, rot);
    let rflat = g.concat_cols(&[e1, e2, e3]);
    // rflat[t, 3j + c] = R[c, j]; K[3j + c, 3i + c] = p_i[j]; S[c, 3i + c] = 1.
    let mut k = Tensor::zeros(9, 3 * p);
    let mut s = Tensor::zeros(3, 3 * p);
    for (i, pt) in rest.iter().enumerate() {
        for c in 0..3 {
            for j in 0..3 {
                k.set(3 * j + c, 3 * i + c, pt[j]);
            }
            s.set(c, 3 * i + c, 1.0);
        }
    }
    let k = g.input(k);
    let s = g.input(s);
    let rotated = g.matmul(rflat, k);
    let shifted = g.matmul(centroid, s);
    Ok(g.add(rotated, shifted))
}

/// Contact consistency: masked squared distance between the human branch's
/// contact prediction and the rigid map of the object prediction, averaged
/// over unmasked entries.
pub fn loss_consistency(g: &mut Graph, contacts_h: Var, object_pred: Var, rest: &[Vec3], mask: &Tensor) -> Result<Var> {
    let c_o = rigid_contacts(g, object_pred, rest)?;
    check_shape("consistency human contacts", g, contacts_h, mask)?;
    check_shape("consistency object contacts", g, c_o, mask)?;
    let count = mask.sum();
    if count == 0.0 {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let m = g.input(mask.clone());
    let d = g.sub(contacts_h, c_o);
    let d = g.mul(d, m);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / count))
}

/// `λ_H L_human + λ_O L_object + λ_C L_consistency`
pub fn combine(g: &mut Graph, human: Var, object: Var, consistency: Var, w: &LossWeights) -> LossTerms {
    let a = g.scale(human, w.lambda_h);
    let b = g.scale(object, w.lambda_o);
    let c = g.scale(consistency, w.lambda_c);
    let ab = g.add(a, b);
    let all = g.add(ab, c);
    LossTerms { human, object, consistency, all }
}
