#include <doctest.h>

#include "coreseg/nn.hpp"

#include "support.hpp"

using namespace coreseg;
using testsupport::gradcheck;
using testsupport::random_tensor;

TEST_CASE("conv3x3 zero padding hand example") {
    Rng rng(0);
    ConvLayer<double> layer = make_conv<double>(1, 1, 3, rng);
    layer.weight.setOnes();
    layer.bias.setZero();
    Tensor3<double> in(2, 2, 1);
    in.at(0, 0, 0) = 1;
    in.at(0, 1, 0) = 2;
    in.at(1, 0, 0) = 3;
    in.at(1, 1, 0) = 4;
    const Tensor3<double> out = conv_forward(layer, in);
    // every 3x3 window covers the whole 2x2 image, the rest is zero padding
    for (Eigen::Index p = 0; p < out.pixels(); ++p) CHECK(out.data(0, p) == doctest::Approx(10.0));
}

TEST_CASE("conv gradcheck (weights, bias, input)") {
    Rng rng(11);
    ConvLayer<double> layer = make_conv<double>(2, 3, 3, rng);
    Tensor3<double> x = random_tensor<double>(4, 5, 2, rng);
    const MatX<double> probe = MatX<double>::NullaryExpr(3, 20, [&](Eigen::Index, Eigen::Index) {
        return rng.uniform(-1.0, 1.0);
    });

    auto loss = [&]() {
        const Tensor3<double> out = conv_forward(layer, x);
        return (out.data.array() * probe.array()).sum();
    };

    ConvLayer<double> grads = zeros_like(layer);
    Tensor3<double> dx;
    Tensor3<double> dout(4, 5, 3);
    dout.data = probe;
    conv_backward(layer, x, dout, grads, &dx);

    std::vector<ParamRef<double>> params, analytic;
    append_conv_params(params, "conv", layer);
    append_conv_params(analytic, "conv", grads);
    params.push_back({"x", &x.data});
    analytic.push_back({"dx", &dx.data});
    CHECK(gradcheck<double>(params, analytic, loss) < 1e-7);
}

TEST_CASE("conv1x1 matches direct matmul") {
    Rng rng(3);
    ConvLayer<double> layer = make_conv<double>(3, 2, 1, rng);
    const Tensor3<double> x = random_tensor<double>(2, 3, 3, rng);
    const Tensor3<double> out = conv_forward(layer, x);
    MatX<double> expect = layer.weight * x.data;
    expect.colwise() += layer.bias.col(0);
    CHECK((out.data - expect).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("maxpool forward, tie-break and backward routing") {
    Tensor3<double> in(2, 2, 1);
    in.at(0, 0, 0) = 5;
    in.at(0, 1, 0) = 5;  // tie with (0,0): first in scan order wins
    in.at(1, 0, 0) = 1;
    in.at(1, 1, 0) = 2;
    Eigen::MatrixXi arg;
    const Tensor3<double> out = maxpool2_forward(in, arg);
    CHECK(out.data(0, 0) == 5);
    CHECK(arg(0, 0) == 0);

    Tensor3<double> dout(1, 1, 1);
    dout.data(0, 0) = 3.5;
    const Tensor3<double> din = maxpool2_backward(arg, dout, 2, 2);
    CHECK(din.data(0, 0) == 3.5);
    CHECK(din.data(0, 1) == 0.0);
}

TEST_CASE("bilinear upsample x2 values and exact adjoint") {
    Tensor3<double> in(1, 2, 1);
    // odd height 1 is not supported by pooling but upsampling is generic
    in.at(0, 0, 0) = 0.0;
    in.at(0, 1, 0) = 4.0;
    const Tensor3<double> out = upsample2_forward(in);
    CHECK(out.width == 4);
    CHECK(out.data(0, 0) == doctest::Approx(0.0));
    CHECK(out.data(0, 1) == doctest::Approx(1.0));
    CHECK(out.data(0, 2) == doctest::Approx(3.0));
    CHECK(out.data(0, 3) == doctest::Approx(4.0));

    Rng rng(5);
    const Tensor3<double> x = random_tensor<double>(3, 4, 2, rng);
    const Tensor3<double> y = random_tensor<double>(6, 8, 2, rng);
    const Tensor3<double> ax = upsample2_forward(x);
    const Tensor3<double> aty = upsample2_backward(y, 3, 4);
    const double lhs = (ax.data.array() * y.data.array()).sum();
    const double rhs = (x.data.array() * aty.data.array()).sum();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("relu backward mask") {
    Tensor3<double> pre(1, 3, 1);
    pre.data << -1.0, 0.0, 2.0;
    Tensor3<double> dout(1, 3, 1);
    dout.data << 10.0, 10.0, 10.0;
    const Tensor3<double> din = relu_backward(pre, dout);
    CHECK(din.data(0, 0) == 0.0);
    CHECK(din.data(0, 1) == 0.0);  // derivative at exactly zero is zero
    CHECK(din.data(0, 2) == 10.0);
}

TEST_CASE("masked cross entropy: values, gradient, sentinel exclusion") {
    Tensor3<double> logits(1, 3, 2);
    logits.data.setZero();
    Eigen::VectorXi labels(3);
    labels << 0, -1, 2;  // -1 ignored, 2 == unknown sentinel for K=2, also excluded
    const auto res = softmax_cross_entropy_masked(logits, labels, 2);
    CHECK(res.valid_pixels == 1);
    CHECK(res.loss == doctest::Approx(std::log(2.0)));
    CHECK(res.dlogits.data(0, 0) == doctest::Approx(-0.5));
    CHECK(res.dlogits.data(1, 0) == doctest::Approx(0.5));
    CHECK(res.dlogits.data(0, 1) == 0.0);
    CHECK(res.dlogits.data(0, 2) == 0.0);

    // gradcheck through the smooth path
    Rng rng(17);
    Tensor3<double> lg = random_tensor<double>(2, 2, 3, rng);
    Eigen::VectorXi labs(4);
    labs << 0, 2, 1, -1;
    auto loss = [&]() { return softmax_cross_entropy_masked(lg, labs, 3).loss; };
    auto res2 = softmax_cross_entropy_masked(lg, labs, 3);
    std::vector<ParamRef<double>> params = {{"logits", &lg.data}};
    std::vector<ParamRef<double>> analytic = {{"dlogits", &res2.dlogits.data}};
    CHECK(gradcheck<double>(params, analytic, loss) < 1e-8);
}

TEST_CASE("argmax tie-break toward lowest class") {
    Tensor3<double> logits(1, 2, 3);
    logits.data.col(0) << 1.0, 1.0, 0.5;  // tie between class 0 and 1
    logits.data.col(1) << 0.0, 2.0, 2.0;  // tie between class 1 and 2
    const Eigen::VectorXi labels = argmax_classes(logits);
    CHECK(labels(0) == 0);
    CHECK(labels(1) == 1);
}

TEST_CASE("adam: zero learning rate leaves parameters unchanged") {
    Rng rng(1);
    ConvLayer<float> layer = make_conv<float>(1, 1, 3, rng);
    const MatX<float> before = layer.weight;
    ConvLayer<float> grads = zeros_like(layer);
    grads.weight.setConstant(1.0f);
    grads.bias.setConstant(1.0f);
    std::vector<ParamRef<float>> params, grefs;
    append_conv_params(params, "l", layer);
    append_conv_params(grefs, "l", grads);
    AdamOptimizer<float> opt(0.0);
    for (int i = 0; i < 5; ++i) opt.step(params, grefs);
    CHECK((layer.weight - before).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("adam minimizes a simple quadratic") {
    MatX<double> x = MatX<double>::Constant(1, 1, 10.0);
    MatX<double> g(1, 1);
    std::vector<ParamRef<double>> params = {{"x", &x}};
    std::vector<ParamRef<double>> grads = {{"g", &g}};
    AdamOptimizer<double> opt(0.1);
    for (int i = 0; i < 500; ++i) {
        g(0, 0) = 2.0 * (x(0, 0) - 3.0);
        opt.step(params, grads);
    }
    CHECK(std::abs(x(0, 0) - 3.0) < 1e-3);
}
