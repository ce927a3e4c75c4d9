#pragma once

#include "structdrop/error.hpp"
#include "structdrop/types.hpp"

#include <iosfwd>
#include <string>

namespace structdrop {

/// Geometry of one convolution: a C x H x W input, C_out filters of K x K.
struct ConvShape
{
  Index channels = 1;
  Index height = 1;
  Index width = 1;
  Index out_channels = 1;
  Index kernel = 1;
  Index stride = 1;
  Index padding = 0;

  Index out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  Index out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
  /// Rows of the im2col matrix (one per output position).
  Index positions() const { return out_height() * out_width(); }
  /// Columns of the im2col matrix (one receptive field).
  Index patch_size() const { return channels * kernel * kernel; }

  void validate() const;
};

inline void ConvShape::validate() const
{
  if (channels < 1 || height < 1 || width < 1 || out_channels < 1 || kernel < 1 || stride < 1 ||
      padding < 0) {
    throw ParameterError("ConvShape: all extents must be >= 1 and padding >= 0");
  }
  if (height + 2 * padding < kernel || width + 2 * padding < kernel) {
    throw ParameterError("ConvShape: kernel larger than padded input");
  }
}

/// Dense product a * b.
///
/// Backed by Eigen's cache-blocked kernel. For a fixed build, thread count and
/// operand shape every output element is accumulated in the same order, so
/// repeated calls are bit-identical.
template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar> gemm(Eigen::MatrixBase<DerivedA> const &a,
                                       Eigen::MatrixBase<DerivedB> const &b)
{
  if (a.cols() != b.rows()) {
    throw ShapeError("gemm: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  Matrix<typename DerivedA::Scalar> out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

/// Unroll receptive fields of a C x (H*W) feature map into rows.
///
/// Row r holds the field of output position r (row-major over the output
/// grid). Column order is channel-major, then kernel row, then kernel column:
/// column = c*K*K + kh*K + kw. Out-of-bounds taps read zero.
template <typename Scalar>
Matrix<Scalar> im2col(Matrix<Scalar> const &input, ConvShape const &shape)
{
  shape.validate();
  if (input.rows() != shape.channels || input.cols() != shape.height * shape.width) {
    throw ShapeError("im2col: input is not C x (H*W) for the declared shape");
  }
  Index const K = shape.kernel;
  Index const oh = shape.out_height();
  Index const ow = shape.out_width();
  Matrix<Scalar> cols = Matrix<Scalar>::Zero(oh * ow, shape.patch_size());
  for (Index c = 0; c < shape.channels; ++c) {
    for (Index kh = 0; kh < K; ++kh) {
      for (Index kw = 0; kw < K; ++kw) {
        Index const col = (c * K + kh) * K + kw;
        for (Index y = 0; y < oh; ++y) {
          Index const iy = y * shape.stride - shape.padding + kh;
          if (iy < 0 || iy >= shape.height) { continue; }
          for (Index x = 0; x < ow; ++x) {
            Index const ix = x * shape.stride - shape.padding + kw;
            if (ix < 0 || ix >= shape.width) { continue; }
            cols(y * ow + x, col) = input(c, iy * shape.width + ix);
          }
        }
      }
    }
  }
  return cols;
}

/// Adjoint of im2col: scatter-add rows back into a C x (H*W) map.
template <typename Scalar>
Matrix<Scalar> col2im(Matrix<Scalar> const &cols, ConvShape const &shape)
{
  shape.validate();
  if (cols.rows() != shape.positions() || cols.cols() != shape.patch_size()) {
    throw ShapeError("col2im: matrix is not positions x patch_size");
  }
  Index const K = shape.kernel;
  Index const oh = shape.out_height();
  Index const ow = shape.out_width();
  Matrix<Scalar> image = Matrix<Scalar>::Zero(shape.channels, shape.height * shape.width);
  for (Index c = 0; c < shape.channels; ++c) {
    for (Index kh = 0; kh < K; ++kh) {
      for (Index kw = 0; kw < K; ++kw) {
        Index const col = (c * K + kh) * K + kw;
        for (Index y = 0; y < oh; ++y) {
          Index const iy = y * shape.stride - shape.padding + kh;
          if (iy < 0 || iy >= shape.height) { continue; }
          for (Index x = 0; x < ow; ++x) {
            Index const ix = x * shape.stride - shape.padding + kw;
            if (ix < 0 || ix >= shape.width) { continue; }
            image(c, iy * shape.width + ix) += cols(y * ow + x, col);
          }
        }
      }
    }
  }
  return image;
}

// Binary layout: u32 rows, u32 cols (little-endian), then rows*cols f32 LE.
void write_matrix_binary(std::ostream &out, Matrix<float> const &m);
Matrix<float> read_matrix_binary(std::istream &in);
void save_matrix_binary(std::string const &path, Matrix<float> const &m);
Matrix<float> load_matrix_binary(std::string const &path);

// Comma-separated rows; blank lines ignored. Every row must have equal width.
Matrix<double> read_matrix_csv(std::istream &in);
Matrix<double> load_matrix_csv(std::string const &path);

} // namespace structdrop
