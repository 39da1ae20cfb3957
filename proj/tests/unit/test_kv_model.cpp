#include <doctest.h>

#include <cstdint>
#include <limits>
#include <random>

#include "kvsim/errors.hpp"
#include "kvsim/kv_model.hpp"

using namespace kvsim;

namespace {

ModelConfig geometry(std::uint32_t l, std::uint32_t h, std::uint32_t d, std::uint32_t b) {
    ModelConfig m;
    m.name = "test";
    m.num_layers = l;
    m.num_kv_heads = h;
    m.head_dim = d;
    m.bytes_per_element = b;
    return m;
}

// Independent ceil division for the oracle.
std::uint64_t ceil_div(std::uint64_t n, std::uint64_t k) { return n / k + (n % k != 0 ? 1 : 0); }

}  // namespace

TEST_CASE("kv_bytes on a 70B-class geometry at a million tokens") {
    const auto m = geometry(80, 8, 128, 2);
    CHECK(kv_bytes(m, 1'000'000) == 327'680'000'000ULL);
    CHECK(kv_bytes(llama_3_1_70b(), 1'000'000) == 327'680'000'000ULL);
}

TEST_CASE("kv_bytes per token and zero tokens") {
    CHECK(kv_bytes(geometry(32, 32, 128, 2), 1) == 2ULL * 32 * 32 * 128 * 2);
    CHECK(kv_bytes(llava_1_5_7b(), 1) == 524'288);
    CHECK(kv_bytes(llava_1_5_7b(), 0) == 0);
    CHECK(kv_bytes(geometry(3, 5, 7, 4), 11) == 2ULL * 3 * 5 * 7 * 4 * 11);
}

TEST_CASE("kv_bytes saturates instead of wrapping") {
    const auto m = geometry(100000, 100000, 100000, 4);
    CHECK(kv_bytes(m, std::numeric_limits<std::uint64_t>::max()) == std::numeric_limits<std::uint64_t>::max());
}

TEST_CASE("model validation") {
    CHECK_NOTHROW(llava_1_5_7b().validate());
    CHECK_THROWS_AS(geometry(0, 1, 1, 2).validate(), ConfigError);
    CHECK_THROWS_AS(geometry(1, 1, 1, 3).validate(), ConfigError);
    CHECK_NOTHROW(geometry(1, 1, 1, 1).validate());
    CHECK_NOTHROW(geometry(1, 1, 1, 4).validate());
    CHECK_THROWS_AS(model_preset("gpt-9"), ConfigError);
    CHECK(model_preset("llava-1.5-7b").bytes_per_token() == 524'288);
}

TEST_CASE("compressed_length matches ceil over random pairs") {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 1000; ++i) {
        const std::uint64_t n = 1 + rng() % 100000;
        const std::uint32_t k = 1 + static_cast<std::uint32_t>(rng() % 64);
        const auto c = compressed_length(n, k);
        CHECK(c == ceil_div(n, k));
        CHECK(c <= n);
        if (k > 1 && n > 1) CHECK(c < n);
        if (n <= k) CHECK(c == 1);
        if (k == 1) CHECK(c == n);
    }
    CHECK(compressed_length(0, 5) == 0);
}

TEST_CASE("split_modalities") {
    auto s = split_modalities(576, 40);
    REQUIRE(s.segments.size() == 2);
    CHECK(s.segments[0].modality == Modality::Image);
    CHECK(s.segments[0].token_count == 576);
    CHECK(s.segments[1].modality == Modality::Text);
    CHECK(s.segments[1].token_count == 40);
    CHECK(s.total_tokens() == 616);

    s = split_modalities(0, 40);
    REQUIRE(s.segments.size() == 1);
    CHECK(s.segments[0].modality == Modality::Text);

    s = split_modalities(10, 0);
    REQUIRE(s.segments.size() == 1);
    CHECK(s.segments[0].modality == Modality::Image);

    CHECK_THROWS_AS(split_modalities(0, 0), EmptyInput);
}

TEST_CASE("compressed_spec per segment") {
    CompressorSpec comp;
    const auto c = compressed_spec(split_modalities(100, 50), comp);
    REQUIRE(c.segments.size() == 2);
    CHECK(c.segments[0] == KVSegment{Modality::Image, 20, 100, true});
    CHECK(c.segments[1] == KVSegment{Modality::Text, 10, 50, true});
    CHECK(c.original_tokens() == 150);
    CHECK(c.any_compressed());

    const auto t = compressed_spec(split_modalities(0, 7), comp);
    CHECK(t.segments[0].token_count == 2);

    comp.factor_k = 1;
    const auto id = compressed_spec(split_modalities(13, 9), comp);
    CHECK(id.segments[0].token_count == 13);
    CHECK(id.segments[1].token_count == 9);

    CHECK_THROWS_AS(compressed_spec(c, comp), AlreadyCompressed);
    auto grown = split_modalities(5, 5);
    grown.decode_appended_tokens = 3;
    CHECK_THROWS_AS(compressed_spec(grown, comp), InvalidState);
}

TEST_CASE("segment order and modality survive compression; bytes shrink") {
    std::mt19937_64 rng(11);
    const auto m = llava_1_5_7b();
    for (int i = 0; i < 500; ++i) {
        const std::uint64_t img = rng() % 3000;
        const std::uint64_t txt = 1 + rng() % 500;
        CompressorSpec comp;
        comp.factor_k = 1 + static_cast<std::uint32_t>(rng() % 10);
        const auto raw = split_modalities(img, txt);
        const auto c = compressed_spec(raw, comp);
        REQUIRE(c.segments.size() == raw.segments.size());
        for (std::size_t s = 0; s < raw.segments.size(); ++s) {
            CHECK(c.segments[s].modality == raw.segments[s].modality);
            CHECK(c.segments[s].original_token_count == raw.segments[s].token_count);
            CHECK(c.segments[s].token_count == ceil_div(raw.segments[s].token_count, comp.factor_k));
        }
        CHECK(kv_bytes(m, c.total_tokens()) <= kv_bytes(m, raw.total_tokens()));
    }
}

TEST_CASE("exact one fifth when lengths divide by five") {
    const auto m = llava_1_5_7b();
    CompressorSpec comp;
    for (std::uint64_t n : {5ULL, 100ULL, 580ULL, 2880ULL}) {
        const auto raw = split_modalities(n, 0);
        const auto c = compressed_spec(raw, comp);
        CHECK(kv_bytes(m, c.total_tokens()) * 5 == kv_bytes(m, raw.total_tokens()));
    }
}

TEST_CASE("compressor validation") {
    CompressorSpec c;
    c.factor_k = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.factor_k = 4;
    CHECK(c.ratio() == doctest::Approx(0.25));
}

TEST_CASE("compress_tensor mean pool") {
    TokenMatrix x(6, 1);
    for (std::size_t i = 0; i < 6; ++i) x.at(i, 0) = static_cast<double>(i + 1);
    CompressorSpec comp;
    comp.factor_k = 3;
    const auto y = compress_tensor(x, comp);
    REQUIRE(y.rows == 2);
    CHECK(y.at(0, 0) == doctest::Approx(2.0));
    CHECK(y.at(1, 0) == doctest::Approx(5.0));

    comp.factor_k = 2;
    CHECK(compress_tensor(TokenMatrix(5, 3, 1.5), comp).rows == 3);
    CHECK(compress_tensor(TokenMatrix(5, 3, 1.5), comp).cols == 3);
}

TEST_CASE("compress_tensor partial final chunk averages its own rows") {
    TokenMatrix x(7, 1);
    for (std::size_t i = 0; i < 7; ++i) x.at(i, 0) = static_cast<double>(i);
    CompressorSpec comp;
    const auto y = compress_tensor(x, comp);
    REQUIRE(y.rows == 2);
    CHECK(y.at(0, 0) == doctest::Approx(2.0));
    CHECK(y.at(1, 0) == doctest::Approx(5.5));
}

TEST_CASE("compress_tensor constant rows and identity") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    TokenMatrix c(13, 4);
    for (std::size_t r = 0; r < 13; ++r) {
        for (std::size_t j = 0; j < 4; ++j) c.at(r, j) = static_cast<double>(j) - 1.25;
    }
    for (auto kind : {MapKind::MeanPool, MapKind::SeededLinear}) {
        CompressorSpec comp;
        comp.map_kind = kind;
        comp.factor_k = 4;
        comp.seed = 99;
        const auto y = compress_tensor(c, comp);
        for (std::size_t r = 0; r < y.rows; ++r) {
            for (std::size_t j = 0; j < 4; ++j) CHECK(y.at(r, j) == doctest::Approx(c.at(0, j)));
        }
    }

    TokenMatrix x(9, 3);
    for (auto& v : x.data) v = u(rng);
    CompressorSpec one;
    one.factor_k = 1;
    CHECK(compress_tensor(x, one) == x);

    CHECK_THROWS_AS(compress_tensor(TokenMatrix(0, 3), CompressorSpec{}), EmptyInput);
}

TEST_CASE("mean pool preserves the global mean when k divides n") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    for (int t = 0; t < 50; ++t) {
        const std::uint32_t k = 1 + static_cast<std::uint32_t>(rng() % 8);
        const std::size_t n = k * (1 + rng() % 20);
        TokenMatrix x(n, 2);
        for (auto& v : x.data) v = u(rng);
        CompressorSpec comp;
        comp.factor_k = k;
        const auto y = compress_tensor(x, comp);
        for (std::size_t j = 0; j < 2; ++j) {
            double a = 0.0, b = 0.0;
            for (std::size_t r = 0; r < n; ++r) a += x.at(r, j);
            for (std::size_t r = 0; r < y.rows; ++r) b += y.at(r, j);
            CHECK(b / static_cast<double>(y.rows) == doctest::Approx(a / static_cast<double>(n)));
        }
    }
}

TEST_CASE("seeded linear weights") {
    CompressorSpec comp;
    comp.map_kind = MapKind::SeededLinear;
    comp.seed = 42;
    for (std::size_t len = 1; len <= comp.factor_k; ++len) {
        const auto w = chunk_weights(comp, len);
        REQUIRE(w.size() == len);
        double sum = 0.0;
        for (double v : w) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(sum == doctest::Approx(1.0));
    }
    CHECK(chunk_weights(comp, 5) == chunk_weights(comp, 5));
    auto other = comp;
    other.seed = 43;
    CHECK(chunk_weights(comp, 5) != chunk_weights(other, 5));

    TokenMatrix x(6, 1);
    for (std::size_t i = 0; i < 6; ++i) x.at(i, 0) = static_cast<double>(i + 1);
    const auto w = chunk_weights(comp, 5);
    double expect = 0.0;
    for (std::size_t i = 0; i < 5; ++i) expect += w[i] * static_cast<double>(i + 1);
    const auto y = compress_tensor(x, comp);
    REQUIRE(y.rows == 2);
    CHECK(y.at(0, 0) == doctest::Approx(expect));
    CHECK(y.at(1, 0) == doctest::Approx(6.0));
}
