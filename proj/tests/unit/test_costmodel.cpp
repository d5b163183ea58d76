// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include "imgref/costmodel.hpp"
#include "imgref/util.hpp"

using namespace imgref;

namespace {

CostParams base_params() {
    CostParams p;
    p.total_context = 4000;
    p.images = 5;
    p.image_tokens = 256;
    p.response = 800;
    p.image_context = 500;
    p.caption = 60;
    return p;
}

}  // namespace

TEST_SUITE("costmodel") {

TEST_CASE("end-to-end cost") {
    CostParams small;
    small.total_context = 100;
    small.response = 50;
    CHECK(costmodel::end_to_end_cost(small) == 22500.0);
    CHECK(costmodel::end_to_end_cost(base_params()) == 36966400.0);
    CHECK(costmodel::end_to_end_cost(CostParams{}) == 0.0);
}

TEST_CASE("three-stage cost") {
    CostParams small;
    small.total_context = 100;
    small.response = 50;
    CHECK(costmodel::three_stage_cost(small) == 45000.0);
    CHECK(costmodel::three_stage_cost(base_params()) == 63893520.0);
    CHECK(costmodel::three_stage_cost(CostParams{}) == 0.0);
}

TEST_CASE("sweep rows and CSV") {
    CostParams zero_images = base_params();
    zero_images.images = 0;
    const auto single = costmodel::sweep(base_params(), "N", {0});
    REQUIRE(single.size() == 1);
    CHECK(single[0].end_to_end == costmodel::end_to_end_cost(zero_images));
    CHECK(single[0].three_stage == costmodel::three_stage_cost(zero_images));

    std::vector<double> ns;
    for (int n = 1; n <= 10; ++n) ns.push_back(n);
    for (const auto& row : costmodel::sweep(base_params(), "N", ns)) CHECK(*row.ratio > 1.0);

    CHECK(costmodel::to_csv(costmodel::sweep(base_params(), "N", {})) == "vary_value,end_to_end,three_stage,ratio\n");
    CHECK(costmodel::to_csv(costmodel::sweep(base_params(), "N", {5})) ==
          "vary_value,end_to_end,three_stage,ratio\n5,36966400,63893520,1.728421\n");
    CHECK(costmodel::to_csv(costmodel::sweep(CostParams{}, "N", {0})) == "vary_value,end_to_end,three_stage,ratio\n0,0,0,\n");
    CHECK_THROWS_AS(costmodel::sweep(base_params(), "Q", {}), CostError);
}

TEST_CASE("costs are monotone in every parameter") {
    SplitMix64 rng(17);
    const char* symbols[] = {"N", "L", "M", "P", "R", "C"};
    for (int t = 0; t < 300; ++t) {
        CostParams p;
        p.total_context = static_cast<double>(rng.bounded(5000));
        p.image_context = static_cast<double>(rng.bounded(static_cast<std::uint64_t>(p.total_context) + 1));
        p.images = static_cast<double>(rng.bounded(12));
        p.image_tokens = static_cast<double>(rng.bounded(1000));
        p.response = static_cast<double>(rng.bounded(2000));
        p.caption = static_cast<double>(rng.bounded(200));
        for (const char* s : symbols) {
            CostParams q = p;
            q.field(s) += 1 + static_cast<double>(rng.bounded(50));
            if (std::string(s) == "L") q.total_context = std::max(q.total_context, q.image_context);
            CHECK(costmodel::end_to_end_cost(q) >= costmodel::end_to_end_cost(p));
            CHECK(costmodel::three_stage_cost(q) >= costmodel::three_stage_cost(p));
        }
        if (p.images == 0 && p.response > 0) {
            CHECK(costmodel::three_stage_cost(p) > costmodel::end_to_end_cost(p));
        }
    }
}

TEST_CASE("parameter validation and JSON") {
    CostParams p = base_params();
    CHECK_NOTHROW(p.validate());
    p.image_context = 5000;
    CHECK_THROWS_AS(p.validate(), CostError);
    p.images = 0;
    CHECK_NOTHROW(p.validate());
    p.response = -1;
    CHECK_THROWS_AS(p.validate(), CostError);
    CHECK_THROWS_AS(p.field("Z"), CostError);

    const auto back = costmodel::params_from_json(costmodel::params_to_json(base_params()));
    CHECK(costmodel::three_stage_cost(back) == costmodel::three_stage_cost(base_params()));
    CHECK_THROWS(costmodel::params_from_json(nlohmann::json::parse(R"({"N": "five"})")));
}

}  // TEST_SUITE
