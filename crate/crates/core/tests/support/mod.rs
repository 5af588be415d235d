pub mod brute;
pub mod gradcheck;
pub mod monolithic;
