//! Log-gamma, digamma and trigamma, plus the normal/chi-square quantiles used
//! for interval construction.
//!
//! The gamma-family functions use upward recurrence to push the argument to
//! 10 or above and then a Bernoulli-coefficient asymptotic series; absolute
//! error stays below 1e-12 over the positive axis (checked against
//! high-precision references in the tests). All functions are defined for
//! strictly positive arguments and return NaN otherwise.

use crate::Scalar;

const SHIFT_THRESHOLD: f64 = 10.0;

/// B_{2k} / (2k (2k-1)) for the Stirling series of log Gamma.
const LGAMMA_COEF: [f64; 6] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
];

/// B_{2k} / (2k) for the digamma series.
const DIGAMMA_COEF: [f64; 6] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
];

/// B_{2k} for the trigamma series.
const TRIGAMMA_COEF: [f64; 6] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
];

/// Natural log of the gamma function, x > 0.
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    if !(x > T::zero()) {
        return <T as Scalar>::nan();
    }
    let threshold = T::c(SHIFT_THRESHOLD);
    let mut shift = T::zero();
    let mut z = x;
    while z < threshold {
        shift += z.ln();
        z += T::one();
    }
    let half = T::c(0.5);
    let ln_two_pi = T::c(core::f64::consts::TAU.ln());
    let mut series = T::zero();
    let inv = T::one() / z;
    let inv2 = inv * inv;
    let mut pow = inv;
    for c in LGAMMA_COEF {
        series += T::c(c) * pow;
        pow *= inv2;
    }
    (z - half) * z.ln() - z + half * ln_two_pi + series - shift
}

/// Digamma function (first derivative of log Gamma), x > 0.
pub fn digamma<T: Scalar>(x: T) -> T {
    if !(x > T::zero()) {
        return <T as Scalar>::nan();
    }
    let threshold = T::c(SHIFT_THRESHOLD);
    let mut acc = T::zero();
    let mut z = x;
    while z < threshold {
        acc -= T::one() / z;
        z += T::one();
    }
    let inv = T::one() / z;
    let inv2 = inv * inv;
    let mut series = T::zero();
    let mut pow = inv2;
    for c in DIGAMMA_COEF {
        series += T::c(c) * pow;
        pow *= inv2;
    }
    acc + z.ln() - T::c(0.5) * inv - series
}

/// Trigamma function (second derivative of log Gamma), x > 0.
pub fn trigamma<T: Scalar>(x: T) -> T {
    if !(x > T::zero()) {
        return <T as Scalar>::nan();
    }
    let threshold = T::c(SHIFT_THRESHOLD);
    let mut acc = T::zero();
    let mut z = x;
    while z < threshold {
        acc += T::one() / (z * z);
        z += T::one();
    }
    let inv = T::one() / z;
    let inv2 = inv * inv;
    let mut series = T::zero();
    let mut pow = inv2 * inv;
    for c in TRIGAMMA_COEF {
        series += T::c(c) * pow;
        pow *= inv2;
    }
    acc + inv + T::c(0.5) * inv2 + series
}

fn horner<T: Scalar>(coef: &[f64], r: T) -> T {
    let mut acc = T::zero();
    for &c in coef.iter().rev() {
        acc = acc * r + T::c(c);
    }
    acc
}

/// Standard normal quantile (Wichura's PPND16), 0 < p < 1.
pub fn normal_quantile<T: Scalar>(p: T) -> T {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608e0,
        1.331_416_678_917_843_774_5e2,
        1.971_590_950_306_551_442_7e3,
        1.373_169_376_550_946_112_5e4,
        4.592_195_393_154_987_145_7e4,
        6.726_577_092_700_870_085_3e4,
        3.343_057_558_358_812_810_5e4,
        2.509_080_928_730_122_672_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091_125_2e1,
        6.871_870_074_920_579_083e2,
        5.394_196_021_424_751_107_7e3,
        2.121_379_430_158_659_586_7e4,
        3.930_789_580_009_271_061e4,
        2.872_908_573_572_194_267_4e4,
        5.226_495_278_852_854_561e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34e0,
        4.630_337_846_156_545_295_9e0,
        5.769_497_221_460_691_405_5e0,
        3.647_848_324_763_204_605_04e0,
        1.270_458_252_452_368_382_58e0,
        2.417_807_251_774_506_117_7e-1,
        2.272_384_498_926_918_458_33e-2,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87e0,
        1.676_384_830_183_803_849_4e0,
        6.897_673_349_851_000_045_5e-1,
        1.481_039_764_274_800_745_9e-1,
        1.519_866_656_361_645_719_66e-2,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2e0,
        5.463_784_911_164_114_369_9e0,
        1.784_826_539_917_291_335_8e0,
        2.965_605_718_285_048_912_3e-1,
        2.653_218_952_657_612_309_3e-2,
        1.242_660_947_388_078_438_6e-3,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_879_376_9e-1,
        1.369_298_809_227_358_053_1e-1,
        1.487_536_129_085_061_485_25e-2,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];

    if !(p > T::zero() && p < T::one()) {
        return <T as Scalar>::nan();
    }
    let half = T::c(0.5);
    let q = p - half;
    if q.abs() <= T::c(0.425) {
        let r = T::c(0.180625) - q * q;
        return q * horner(&A, r) / horner(&B, r);
    }
    let r = if q < T::zero() { p } else { T::one() - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= T::c(5.0) {
        let r = r - T::c(1.6);
        horner(&C, r) / horner(&D, r)
    } else {
        let r = r - T::c(5.0);
        horner(&E, r) / horner(&F, r)
    };
    if q < T::zero() {
        -val
    } else {
        val
    }
}

/// Quantile of the chi-square distribution with one degree of freedom.
pub fn chi2_quantile_1df<T: Scalar>(level: T) -> T {
    let z = normal_quantile((T::one() + level) * T::c(0.5));
    z * z
}
