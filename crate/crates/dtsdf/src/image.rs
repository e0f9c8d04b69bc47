//! Dense row-major image containers and sampling helpers.

use nalgebra::Vector2;

use rayon::prelude::*;

/// Row-major 2D grid of pixel values.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

/// Builds an image by evaluating `f` per pixel across worker threads.
///
/// Output is identical to the sequential [`Image::from_fn`] for pure `f`.
pub fn par_image_from_fn<T: Copy + Send>(
    width: u32,
    height: u32,
    f: impl Fn(u32, u32) -> T + Sync,
) -> Image<T> {
    let data: Vec<T> = (0..width as usize * height as usize)
        .into_par_iter()
        .map(|i| f((i % width as usize) as u32, (i / width as usize) as u32))
        .collect();
    Image::from_vec(width, height, data)
}

impl<T: Copy> Image<T> {
    pub fn from_fill(width: u32, height: u32, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> T) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, x: u32, y: u32) -> T {
        debug_assert!(x < self.width && y < self.height);
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: T) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y as usize * self.width as usize + x as usize] = value;
    }

    /// `get` with a bounds check.
    pub fn try_get(&self, x: i64, y: i64) -> Option<T> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            Some(self.get(x as u32, y as u32))
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Pixel coordinate of flat index `i`.
    pub fn coords(&self, i: usize) -> (u32, u32) {
        ((i % self.width as usize) as u32, (i / self.width as usize) as u32)
    }
}

/// Scalar images that support interpolation. Invalid pixels are NaN.
pub type ScalarImage = Image<f64>;

impl ScalarImage {
    pub fn invalid(width: u32, height: u32) -> Self {
        Self::from_fill(width, height, f64::NAN)
    }

    /// Value at `(x, y)` or `None` when the pixel is invalid.
    pub fn valid_get(&self, x: u32, y: u32) -> Option<f64> {
        let v = self.get(x, y);
        v.is_finite().then_some(v)
    }

    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.get(x, y).is_finite()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| v.is_finite()).count()
    }

    /// Bilinear sample; `None` when out of bounds or when any of the four
    /// support pixels is invalid.
    pub fn bilinear(&self, p: &Vector2<f64>) -> Option<f64> {
        let (x0, y0, fx, fy) = self.bilinear_base(p)?;
        let v00 = self.valid_get(x0, y0)?;
        let v10 = self.valid_get(x0 + 1, y0)?;
        let v01 = self.valid_get(x0, y0 + 1)?;
        let v11 = self.valid_get(x0 + 1, y0 + 1)?;
        Some(bilerp(v00, v10, v01, v11, fx, fy))
    }

    /// Image gradient at `(x, y)` by central differences, `(d/dx, d/dy)`.
    ///
    /// `None` at the image border or next to invalid pixels.
    pub fn central_gradient(&self, x: u32, y: u32) -> Option<Vector2<f64>> {
        if x == 0 || y == 0 || x + 1 >= self.width || y + 1 >= self.height {
            return None;
        }
        let gx = (self.valid_get(x + 1, y)? - self.valid_get(x - 1, y)?) * 0.5;
        let gy = (self.valid_get(x, y + 1)? - self.valid_get(x, y - 1)?) * 0.5;
        Some(Vector2::new(gx, gy))
    }

    /// Bilinearly interpolated central-difference gradient at a floating
    /// point position.
    pub fn bilinear_gradient(&self, p: &Vector2<f64>) -> Option<Vector2<f64>> {
        let (x0, y0, fx, fy) = self.bilinear_base(p)?;
        let g00 = self.central_gradient(x0, y0)?;
        let g10 = self.central_gradient(x0 + 1, y0)?;
        let g01 = self.central_gradient(x0, y0 + 1)?;
        let g11 = self.central_gradient(x0 + 1, y0 + 1)?;
        Some(Vector2::new(
            bilerp(g00.x, g10.x, g01.x, g11.x, fx, fy),
            bilerp(g00.y, g10.y, g01.y, g11.y, fx, fy),
        ))
    }

    fn bilinear_base(&self, p: &Vector2<f64>) -> Option<(u32, u32, f64, f64)> {
        if !(p.x >= 0.0 && p.y >= 0.0) {
            return None;
        }
        // Clamp exact upper-edge hits into the last full cell.
        let max_x = (self.width as f64 - 1.0) * (1.0 - f64::EPSILON);
        let max_y = (self.height as f64 - 1.0) * (1.0 - f64::EPSILON);
        if p.x > self.width as f64 - 1.0 || p.y > self.height as f64 - 1.0 {
            return None;
        }
        let x = p.x.min(max_x);
        let y = p.y.min(max_y);
        let x0 = x.floor();
        let y0 = y.floor();
        Some((x0 as u32, y0 as u32, x - x0, y - y0))
    }
}

fn bilerp(v00: f64, v10: f64, v01: f64, v11: f64, fx: f64, fy: f64) -> f64 {
    let top = v00 * (1.0 - fx) + v10 * fx;
    let bottom = v01 * (1.0 - fx) + v11 * fx;
    top * (1.0 - fy) + bottom * fy
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bilinear_at_integer_coordinates_is_exact() {
        let img = ScalarImage::from_fn(4, 3, |x, y| (x + 10 * y) as f64);
        assert_abs_diff_eq!(img.bilinear(&Vector2::new(2.0, 1.0)).unwrap(), 12.0);
    }

    #[test]
    fn bilinear_midpoint_averages() {
        let img = ScalarImage::from_fn(2, 2, |x, y| (x + 2 * y) as f64);
        assert_abs_diff_eq!(img.bilinear(&Vector2::new(0.5, 0.5)).unwrap(), 1.5);
    }

    #[test]
    fn bilinear_rejects_invalid_support() {
        let mut img = ScalarImage::from_fill(4, 4, 1.0);
        img.set(1, 1, f64::NAN);
        assert_eq!(img.bilinear(&Vector2::new(0.5, 0.5)), None);
        assert!(img.bilinear(&Vector2::new(1.5, 1.5)).is_none());
        assert!(img.bilinear(&Vector2::new(2.5, 2.5)).is_some());
    }

    #[test]
    fn bilinear_rejects_out_of_bounds() {
        let img = ScalarImage::from_fill(3, 3, 1.0);
        assert_eq!(img.bilinear(&Vector2::new(-0.1, 1.0)), None);
        assert_eq!(img.bilinear(&Vector2::new(2.1, 1.0)), None);
        assert!(img.bilinear(&Vector2::new(2.0, 2.0)).is_some());
    }

    #[test]
    fn central_gradient_of_linear_ramp_is_slope() {
        let img = ScalarImage::from_fn(5, 5, |x, y| 3.0 * x as f64 - 2.0 * y as f64);
        let g = img.central_gradient(2, 2).unwrap();
        assert_abs_diff_eq!(g, Vector2::new(3.0, -2.0), epsilon = 1e-12);
    }

    #[test]
    fn gradient_is_none_at_border() {
        let img = ScalarImage::from_fill(3, 3, 1.0);
        assert_eq!(img.central_gradient(0, 1), None);
        assert_eq!(img.central_gradient(1, 2), None);
        assert!(img.central_gradient(1, 1).is_some());
    }
}
