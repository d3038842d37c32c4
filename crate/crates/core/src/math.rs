//! Float functions: the platform implementations with `std`, `libm` otherwise.

macro_rules! unary {
    ($($name:ident => $std:ident, $libm:ident;)*) => {$(
        #[cfg(feature = "std")]
        #[inline]
        pub fn $name(x: f64) -> f64 {
            x.$std()
        }
        #[cfg(not(feature = "std"))]
        #[inline]
        pub fn $name(x: f64) -> f64 {
            libm::$libm(x)
        }
    )*};
}

unary! {
    exp => exp, exp;
    ln => ln, log;
    sqrt => sqrt, sqrt;
    tanh => tanh, tanh;
    atanh => atanh, atanh;
    atan => atan, atan;
    floor => floor, floor;
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}
