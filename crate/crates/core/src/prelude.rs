pub(crate) use alloc::borrow::ToOwned;
pub(crate) use alloc::collections::{BTreeMap, BTreeSet};
pub(crate) use alloc::format;
pub(crate) use alloc::string::String;
#[cfg(test)]
pub(crate) use alloc::string::ToString;
pub(crate) use alloc::vec;
pub(crate) use alloc::vec::Vec;

#[cfg(not(any(test, feature = "std")))]
#[allow(unused_imports)]
pub(crate) use num_traits::Float;
