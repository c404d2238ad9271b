//! Holds the `acceptance` test target, which runs after the unit and
//! integration tests of the other workspace members.
