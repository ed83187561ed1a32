#include <catch2/catch_amalgamated.hpp>

#include "birdgp/cli.hpp"

TEST_CASE("placeholder_acceptance") { SUCCEED(); }
