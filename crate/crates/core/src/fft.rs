//! Small n-dimensional FFT helper built from 1-D transforms, used by the
//! fast convolution path and the frequency-domain norms.

use num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place n-D FFT over a lattice stored axis-major (last axis fastest).
pub fn fft_nd(data: &mut [Complex64], sizes: &[usize], inverse: bool) {
    let n = sizes.len();
    let total: usize = sizes.iter().product();
    assert_eq!(data.len(), total);
    let mut planner = FftPlanner::<f64>::new();
    // strides, last axis fastest
    let mut strides = vec![1usize; n];
    for a in (0..n.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * sizes[a + 1];
    }
    for axis in 0..n {
        let len = sizes[axis];
        let stride = strides[axis];
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        let mut line = vec![Complex64::default(); len];
        let lines = total / len;
        for li in 0..lines {
            // decompose li into coordinates of the remaining axes
            let mut rem = li;
            let mut base = 0usize;
            for a in 0..n {
                if a == axis {
                    continue;
                }
                let c = rem % sizes[a];
                rem /= sizes[a];
                base += c * strides[a];
            }
            for k in 0..len {
                line[k] = data[base + k * stride];
            }
            fft.process(&mut line);
            for k in 0..len {
                data[base + k * stride] = line[k];
            }
        }
    }
    if inverse {
        let scale = 1.0 / total as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

/// Forward FFT of a real lattice.
pub fn fft_real(values: &[f64], sizes: &[usize]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(&mut buf, sizes, false);
    buf
}

/// Inverse FFT keeping only the real part.
pub fn ifft_real(mut buf: Vec<Complex64>, sizes: &[usize]) -> Vec<f64> {
    fft_nd(&mut buf, sizes, true);
    buf.into_iter().map(|c| c.re).collect()
}
