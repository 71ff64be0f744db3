// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "lens/optim.hpp"
#include "lens/rng.hpp"

using namespace lens;

TEST_CASE("cosine schedule with warmup follows the closed form") {
    const double lr_max = 2.0;
    const std::int64_t total = 100;
    const double ratio = 0.05; // 5 warmup steps

    CHECK(cosine_warmup_lr(0, total, ratio, lr_max) == 0.0);
    CHECK(cosine_warmup_lr(2, total, ratio, lr_max) == doctest::Approx(lr_max * 2.0 / 5.0));
    CHECK(cosine_warmup_lr(5, total, ratio, lr_max) == doctest::Approx(lr_max));
    // closed form inside the decay phase
    for (std::int64_t s : {6, 23, 52, 99}) {
        const double progress = static_cast<double>(s - 5) / 95.0;
        CHECK(cosine_warmup_lr(s, total, ratio, lr_max) ==
              doctest::Approx(lr_max * 0.5 * (1.0 + std::cos(M_PI * progress))));
    }
    CHECK(cosine_warmup_lr(100, total, ratio, lr_max) == doctest::Approx(0.0));

    // monotone decay after the peak
    double prev = cosine_warmup_lr(5, total, ratio, lr_max);
    for (std::int64_t s = 6; s <= 100; ++s) {
        const double lr = cosine_warmup_lr(s, total, ratio, lr_max);
        CHECK(lr <= prev);
        prev = lr;
    }
}

TEST_CASE("cosine schedule without warmup starts at the peak") {
    CHECK(cosine_warmup_lr(0, 10, 0.0, 3.0) == doctest::Approx(3.0));
    CHECK(cosine_warmup_lr(10, 10, 0.0, 3.0) == doctest::Approx(0.0));
    CHECK_THROWS_AS((void)cosine_warmup_lr(0, 0, 0.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS((void)cosine_warmup_lr(0, 10, 1.0, 1.0), std::invalid_argument);
}

TEST_CASE("adam first step matches the hand-computed update") {
    Vecd p = Vecd::Zero(2);
    Vecd g(2);
    g << 1.0, -2.0;
    Adam<double> adam(2, 0.9, 0.999, 1e-8);
    adam.step(p, g, 0.1);
    // bias-corrected first step is lr * sign(g) up to epsilon
    CHECK(p(0) == doctest::Approx(-0.1 * 1.0 / (1.0 + 1e-8)));
    CHECK(p(1) == doctest::Approx(0.1 * 2.0 / (2.0 + 1e-8)));

    // second step with the same gradient keeps moving the same direction
    adam.step(p, g, 0.1);
    CHECK(p(0) < -0.09);
    CHECK(p(1) > 0.09);
    CHECK(adam.steps_taken() == 2);
}

TEST_CASE("adam never touches the frozen prefix even with stale momentum") {
    Rng rng = Rng::seeded(6);
    Vecd p(6);
    for (Index i = 0; i < 6; ++i) p(i) = rng.normal();
    const Vecd p0 = p;
    Adam<double> adam(6);
    for (int step = 0; step < 25; ++step) {
        Vecd g(6);
        for (Index i = 0; i < 6; ++i) g(i) = rng.normal();
        adam.step(p, g, 0.05, 3);
    }
    CHECK((p.head(3) - p0.head(3)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((p.tail(3) - p0.tail(3)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("adam rejects mismatched sizes") {
    Adam<double> adam(3);
    Vecd p = Vecd::Zero(4), g = Vecd::Zero(4);
    CHECK_THROWS_AS(adam.step(p, g, 0.1), std::invalid_argument);
}
