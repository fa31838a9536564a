//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

pub mod bruteforce;
pub mod criteria;
pub mod epdms_ref;
pub mod gradcheck;
pub mod scenes;
