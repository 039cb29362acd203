//! Reference computations for tests. Nothing here is used by the library
//! itself: each routine takes a deliberately different route from the code
//! it checks (exact integer arithmetic, enumeration, finite differences).

pub mod bessel;
pub mod fd;
pub mod brute;
