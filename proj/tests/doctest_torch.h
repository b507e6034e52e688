#pragma once

// torch's c10 logging defines CHECK/CHECK_EQ/... macros that collide with
// doctest's assertion macros. Include torch first, drop the c10 spellings,
// then let doctest define its own.
#include <torch/torch.h>

#ifdef CHECK
#undef CHECK
#endif
#ifdef CHECK_EQ
#undef CHECK_EQ
#endif
#ifdef CHECK_NE
#undef CHECK_NE
#endif
#ifdef CHECK_LE
#undef CHECK_LE
#endif
#ifdef CHECK_LT
#undef CHECK_LT
#endif
#ifdef CHECK_GE
#undef CHECK_GE
#endif
#ifdef CHECK_GT
#undef CHECK_GT
#endif
#ifdef WARN
#undef WARN
#endif
#ifdef FAIL
#undef FAIL
#endif

#include <doctest.h>
