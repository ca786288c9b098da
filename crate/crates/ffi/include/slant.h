#ifndef SLANT_H
#define SLANT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SlantStatus {
  SLANT_STATUS_OK = 0,
  SLANT_STATUS_NULL_POINTER = 1,
  SLANT_STATUS_INVALID_ARGUMENT = 2,
  SLANT_STATUS_IO = 3,
  SLANT_STATUS_FORMAT = 4,
  SLANT_STATUS_GEOMETRY = 5,
  SLANT_STATUS_HARMONIZATION = 6,
  SLANT_STATUS_TILING = 7,
  SLANT_STATUS_FUSION = 8,
  SLANT_STATUS_SEGMENTATION = 9,
  SLANT_STATUS_PANIC = 10,
} SlantStatus;

typedef struct SlantHarmonizationModel SlantHarmonizationModel;

typedef struct SlantIntensityVolume SlantIntensityVolume;

typedef struct SlantLabelVolume SlantLabelVolume;

typedef struct SlantTileGrid SlantTileGrid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *slant_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *slant_version(void);

/**
 * Copies `len` doubles (x fastest) into a new volume.
 */
enum SlantStatus slant_intensity_new(const size_t *dims,
                                     const double *affine,
                                     const double *data,
                                     size_t len,
                                     struct SlantIntensityVolume **out);

enum SlantStatus slant_intensity_read_nifti(const char *path, struct SlantIntensityVolume **out);

/**
 * Writes float32 NIfTI-1.
 */
enum SlantStatus slant_intensity_write_nifti(const struct SlantIntensityVolume *vol,
                                             const char *path);

enum SlantStatus slant_intensity_dims(const struct SlantIntensityVolume *vol, size_t *dims);

/**
 * Writes the index-to-world affine into `affine[16]`.
 */
enum SlantStatus slant_intensity_affine(const struct SlantIntensityVolume *vol, double *affine);

/**
 * Borrowed pointer to the voxel data, valid while the volume lives.
 */
const double *slant_intensity_data(const struct SlantIntensityVolume *vol, size_t *len);

void slant_intensity_free(struct SlantIntensityVolume *vol);

/**
 * Copies `len` labels (x fastest), each below `num_labels`, into a new volume.
 */
enum SlantStatus slant_labels_new(const size_t *dims,
                                  const double *affine,
                                  const uint16_t *data,
                                  size_t len,
                                  uint16_t num_labels,
                                  struct SlantLabelVolume **out);

/**
 * `num_labels` 0 infers the count from the largest label present.
 */
enum SlantStatus slant_labels_read_nifti(const char *path,
                                         uint16_t num_labels,
                                         struct SlantLabelVolume **out);

/**
 * Writes int16 NIfTI-1.
 */
enum SlantStatus slant_labels_write_nifti(const struct SlantLabelVolume *vol, const char *path);

enum SlantStatus slant_labels_dims(const struct SlantLabelVolume *vol, size_t *dims);

/**
 * 0 when `vol` is NULL.
 */
uint16_t slant_labels_num_labels(const struct SlantLabelVolume *vol);

enum SlantStatus slant_labels_affine(const struct SlantLabelVolume *vol, double *affine);

const uint16_t *slant_labels_data(const struct SlantLabelVolume *vol, size_t *len);

void slant_labels_free(struct SlantLabelVolume *vol);

/**
 * Trilinear resampling onto the grid of `target`. `transform` maps target
 * world coordinates to source world coordinates.
 */
enum SlantStatus slant_resample_intensity(const struct SlantIntensityVolume *src,
                                          const double *transform,
                                          const struct SlantIntensityVolume *target,
                                          struct SlantIntensityVolume **out);

/**
 * Nearest-neighbour label resampling onto the grid of `target`.
 */
enum SlantStatus slant_resample_labels(const struct SlantLabelVolume *src,
                                       const double *transform,
                                       const struct SlantLabelVolume *target,
                                       struct SlantLabelVolume **out);

enum SlantStatus slant_grid_build(const size_t *atlas_dims,
                                  const size_t *grid,
                                  const size_t *tile_size,
                                  struct SlantTileGrid **out);

/**
 * The 27-tile layout on the 172x220x156 atlas.
 */
enum SlantStatus slant_grid_slant27(struct SlantTileGrid **out);

/**
 * 0 when `grid` is NULL.
 */
size_t slant_grid_len(const struct SlantTileGrid *grid);

/**
 * Origin and size of tile `index` (x fastest, then y, then z).
 */
enum SlantStatus slant_grid_tile(const struct SlantTileGrid *grid,
                                 size_t index,
                                 size_t *origin,
                                 size_t *size);

/**
 * Fills `counts[len]` with the number of tiles covering each atlas voxel;
 * `len` must equal the atlas voxel count.
 */
enum SlantStatus slant_grid_coverage(const struct SlantTileGrid *grid,
                                     uint32_t *counts,
                                     size_t len);

void slant_grid_free(struct SlantTileGrid *grid);

/**
 * Copies tile `index` out of an atlas-space volume.
 */
enum SlantStatus slant_extract_tile(const struct SlantIntensityVolume *vol,
                                    const struct SlantTileGrid *grid,
                                    size_t index,
                                    struct SlantIntensityVolume **out);

/**
 * Majority vote over `count` tile segmentations in grid order. The fused
 * volume takes the grid of `reference`, or a 1 mm grid when it is NULL.
 * `tie_count` may be NULL.
 */
enum SlantStatus slant_fuse_majority(const struct SlantLabelVolume *const *segs,
                                     size_t count,
                                     const struct SlantTileGrid *grid,
                                     const struct SlantIntensityVolume *reference,
                                     struct SlantLabelVolume **out,
                                     size_t *tie_count);

/**
 * Places each tile at its origin; the grid must be a partition.
 */
enum SlantStatus slant_fuse_concatenate(const struct SlantLabelVolume *const *segs,
                                        size_t count,
                                        const struct SlantTileGrid *grid,
                                        const struct SlantIntensityVolume *reference,
                                        struct SlantLabelVolume **out);

/**
 * Dice for one label; writes NaN when neither volume contains it.
 */
enum SlantStatus slant_dice(const struct SlantLabelVolume *automatic,
                            const struct SlantLabelVolume *manual,
                            uint16_t label,
                            double *out);

/**
 * Mean and median Dice over the labels present in either volume (NaN when
 * none are) and the number of such labels. Any output may be NULL.
 */
enum SlantStatus slant_dice_summary(const struct SlantLabelVolume *automatic,
                                    const struct SlantLabelVolume *manual,
                                    double *mean,
                                    double *median,
                                    size_t *labels_evaluated);

/**
 * Loads a model directory written by `slant fit-harmonization`.
 */
enum SlantStatus slant_harmonization_load(const char *dir, struct SlantHarmonizationModel **out);

/**
 * Harmonizes an atlas-space volume. `beta1`/`beta0` may be NULL.
 */
enum SlantStatus slant_harmonize(const struct SlantHarmonizationModel *model,
                                 const struct SlantIntensityVolume *vol,
                                 struct SlantIntensityVolume **out,
                                 double *beta1,
                                 double *beta0);

void slant_harmonization_free(struct SlantHarmonizationModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLANT_H */
