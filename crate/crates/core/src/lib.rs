pub mod config;
pub mod credit;
pub mod de;
pub mod distribution;
pub mod error;
pub mod measures;
pub mod ot;
pub mod quantize2;
pub mod quantize3;
