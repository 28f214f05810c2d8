use std::collections::BTreeMap;

use autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::gradcore::{flatten_subsample, GradientBundle, SubsampleMask};

/// Secret linear disaggregator `d(v) = D v` (no bias) followed by the
/// reconstructor `r(h) = R h + b`. In the fused form `R` is the identity,
/// `n_d = n_r`, and the whole decoder is one linear layer with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    d_matrix: Tensor,
    r_weight: Option<Tensor>,
    r_bias: Tensor,
    image_shape: [usize; 3],
}

fn uniform(shape: [usize; 2], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound))
}

impl DecoderParams {
    /// Fused decoder `n_sub -> H*W*C` with uniform `+-1/sqrt(n_sub)` init.
    pub fn fused(n_sub: usize, image_shape: [usize; 3], seed: u64) -> Result<Self> {
        let n_r: usize = image_shape.iter().product();
        if n_sub == 0 || n_r == 0 {
            return Err(Error::Dimension("decoder sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (n_sub as f64).sqrt();
        Ok(DecoderParams {
            d_matrix: uniform([n_r, n_sub], bound, &mut rng),
            r_weight: None,
            r_bias: Tensor::from_fn(vec![n_r], |_| rng.gen_range(-bound..=bound)),
            image_shape,
        })
    }

    /// Separate `d: n_sub -> n_d` and `r: n_d -> H*W*C`.
    pub fn unfused(n_sub: usize, n_d: usize, image_shape: [usize; 3], seed: u64) -> Result<Self> {
        let n_r: usize = image_shape.iter().product();
        if n_sub == 0 || n_d == 0 || n_r == 0 {
            return Err(Error::Dimension("decoder sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_bound = 1.0 / (n_sub as f64).sqrt();
        let r_bound = 1.0 / (n_d as f64).sqrt();
        Ok(DecoderParams {
            d_matrix: uniform([n_d, n_sub], d_bound, &mut rng),
            r_weight: Some(uniform([n_r, n_d], r_bound, &mut rng)),
            r_bias: Tensor::from_fn(vec![n_r], |_| rng.gen_range(-r_bound..=r_bound)),
            image_shape,
        })
    }

    /// Fused decoder from an explicit matrix `[n_r, n_sub]` and bias `[n_r]`.
    pub fn from_fused(matrix: Tensor, bias: Tensor, image_shape: [usize; 3]) -> Result<Self> {
        let n_r: usize = image_shape.iter().product();
        if matrix.shape().len() != 2 || matrix.shape()[0] != n_r || bias.shape() != [n_r] {
            return Err(Error::Dimension(format!(
                "fused decoder needs [{n_r}, n_sub] and [{n_r}], got {:?} and {:?}",
                matrix.shape(),
                bias.shape()
            )));
        }
        Ok(DecoderParams {
            d_matrix: matrix,
            r_weight: None,
            r_bias: bias,
            image_shape,
        })
    }

    pub fn is_fused(&self) -> bool {
        self.r_weight.is_none()
    }

    pub fn n_sub(&self) -> usize {
        self.d_matrix.shape()[1]
    }

    pub fn n_d(&self) -> usize {
        self.d_matrix.shape()[0]
    }

    pub fn n_r(&self) -> usize {
        self.r_bias.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn d_matrix(&self) -> &Tensor {
        &self.d_matrix
    }

    pub fn r_weight(&self) -> Option<&Tensor> {
        self.r_weight.as_ref()
    }

    pub fn r_bias(&self) -> &Tensor {
        &self.r_bias
    }

    fn check_len(&self, v: &[f64], expected: usize, what: &str) -> Result<()> {
        if v.len() != expected {
            return Err(Error::Dimension(format!(
                "{what}: expected {expected} values, got {}",
                v.len()
            )));
        }
        Ok(())
    }

    /// `d(v)`: exactly linear in `v`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v, self.n_sub(), "decoder input")?;
        Ok(matvec(&self.d_matrix, v))
    }

    /// `r(h)`.
    pub fn reconstruct(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_len(h, self.n_d(), "hidden vector")?;
        let mut out = match &self.r_weight {
            Some(r) => matvec(r, h),
            None => h.to_vec(),
        };
        out.iter_mut()
            .zip(self.r_bias.data())
            .for_each(|(o, b)| *o += b);
        Ok(out)
    }

    /// `r(d(v))` reshaped to the image dimensions.
    pub fn decode(&self, v: &[f64]) -> Result<Image> {
        let [h, w, c] = self.image_shape;
        Image::new(h, w, c, self.reconstruct(&self.project(v)?)?)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> DecoderVars<'t> {
        DecoderVars {
            d: tape.param(self.d_matrix.clone()),
            r_weight: self.r_weight.as_ref().map(|r| tape.param(r.clone())),
            r_bias: tape.param(self.r_bias.clone()),
        }
    }

    /// Named tensors, in the order [`DecoderVars::params`] lists them.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("d.matrix".to_string(), self.d_matrix.clone());
        m.insert("r.bias".to_string(), self.r_bias.clone());
        if let Some(r) = &self.r_weight {
            m.insert("r.weight".to_string(), r.clone());
        }
        m
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "d.matrix" => Some(&mut self.d_matrix),
            "r.bias" => Some(&mut self.r_bias),
            "r.weight" => self.r_weight.as_mut(),
            _ => None,
        }
    }

    pub fn from_tensors(
        mut tensors: BTreeMap<String, Tensor>,
        image_shape: [usize; 3],
    ) -> Result<Self> {
        let mut take = |k: &str| tensors.remove(k);
        let (Some(d), Some(b)) = (take("d.matrix"), take("r.bias")) else {
            return Err(Error::Dimension(
                "decoder archive lacks d.matrix or r.bias".into(),
            ));
        };
        let r = take("r.weight");
        let n_r: usize = image_shape.iter().product();
        let ok = d.shape().len() == 2
            && b.shape() == [n_r]
            && match &r {
                Some(r) => r.shape() == [n_r, d.shape()[0]],
                None => d.shape()[0] == n_r,
            };
        if !ok {
            return Err(Error::Dimension(
                "decoder tensor shapes are inconsistent".into(),
            ));
        }
        Ok(DecoderParams {
            d_matrix: d,
            r_weight: r,
            r_bias: b,
            image_shape,
        })
    }

    /// `d(flatten_subsample(g))`.
    pub fn project_bundle(&self, g: &GradientBundle, mask: &SubsampleMask) -> Result<Vec<f64>> {
        if mask.len() != self.n_sub() {
            return Err(Error::Dimension(format!(
                "mask selects {} entries, decoder takes {}",
                mask.len(),
                self.n_sub()
            )));
        }
        self.project(&flatten_subsample(g, mask)?)
    }
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    m.data()
        .chunks_exact(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Decoder parameters bound to a tape.
#[derive(Clone, Copy)]
pub struct DecoderVars<'t> {
    pub d: Var<'t>,
    pub r_weight: Option<Var<'t>>,
    pub r_bias: Var<'t>,
}

impl<'t> DecoderVars<'t> {
    /// `[k, n_sub] -> [k, n_d]`.
    pub fn project(&self, v: Var<'t>) -> Var<'t> {
        v.matmul_t(self.d)
    }

    /// `[k, n_d] -> [k, n_r]`.
    pub fn reconstruct(&self, h: Var<'t>) -> Var<'t> {
        let k = h.shape()[0];
        let h = match self.r_weight {
            Some(r) => h.matmul_t(r),
            None => h,
        };
        h + autodiff::nn::broadcast_rows(self.r_bias, k)
    }

    /// Same names and order as [`DecoderParams::tensors`].
    pub fn params(&self) -> Vec<(String, Var<'t>)> {
        let mut v = vec![
            ("d.matrix".to_string(), self.d),
            ("r.bias".to_string(), self.r_bias),
        ];
        if let Some(r) = self.r_weight {
            v.push(("r.weight".to_string(), r));
        }
        v
    }
}
