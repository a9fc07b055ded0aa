use super::ConvSpec;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reference convolution: one loop per axis of the sum, accumulated in `f64`
/// whatever the storage type.
pub fn conv3d_naive<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = spec.check(x.shape(), w.shape(), b)?;
    let [batch, c_in, d, h, wd] = [
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    ];
    let [_, c_out, od, oh, ow] = [
        out_shape[0],
        out_shape[1],
        out_shape[2],
        out_shape[3],
        out_shape[4],
    ];
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let [kd, kh, kw] = spec.kernel;
    let xv = |n: usize, c: usize, i: isize, j: isize, k: isize| -> f64 {
        if i < 0 || j < 0 || k < 0 || i >= d as isize || j >= h as isize || k >= wd as isize {
            return 0.0;
        }
        x.data()[(((n * c_in + c) * d + i as usize) * h + j as usize) * wd + k as usize].as_f64()
    };
    let wv = |co: usize, ci: usize, a: usize, bb: usize, c: usize| -> f64 {
        w.data()[(((co * cin_g + ci) * kd + a) * kh + bb) * kw + c].as_f64()
    };
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for n in 0..batch {
        for co in 0..c_out {
            let g = co / cout_g;
            let bias = b.map_or(0.0, |b| b.data()[co].as_f64());
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = bias;
                        for ci in 0..cin_g {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let i = (zd * spec.stride[0] + a * spec.dilation[0])
                                            as isize
                                            - spec.padding[0] as isize;
                                        let j = (zh * spec.stride[1] + bb * spec.dilation[1])
                                            as isize
                                            - spec.padding[1] as isize;
                                        let k = (zw * spec.stride[2] + c * spec.dilation[2])
                                            as isize
                                            - spec.padding[2] as isize;
                                        acc +=
                                            wv(co, ci, a, bb, c) * xv(n, g * cin_g + ci, i, j, k);
                                    }
                                }
                            }
                        }
                        out.push(T::from_f64(acc));
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}
