//! Named parameter groups that are generic over their storage.
//!
//! The same struct holds plain [`Tensor`](crate::tensor::Tensor)s inside a
//! model and [`Var`](crate::tensor::Var)s once bound to a tape, so the
//! forward code, the optimizer and the checkpoint writer all agree on field
//! order without a separate registry.

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)+
        }

        impl<T> $name<T> {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> $name<U> {
                $name { $($field: f(stringify!($field), &self.$field),)+ }
            }

            pub fn try_map<U, E>(
                &self,
                mut f: impl FnMut(&'static str, &T) -> Result<U, E>,
            ) -> Result<$name<U>, E> {
                Ok($name { $($field: f(stringify!($field), &self.$field)?,)+ })
            }

            pub fn fields(&self) -> Vec<(&'static str, &T)> {
                vec![$((stringify!($field), &self.$field)),+]
            }

            pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut T)> {
                vec![$((stringify!($field), &mut self.$field)),+]
            }
        }
    };
}

pub(crate) use param_group;
