/**
 * Deterministic convolutional feature extractor.
 *
 * There is no training and no downloaded checkpoint: the weights are derived
 * from the backbone name with a seeded generator, so the same name always
 * produces the same features. Images are resized to 112 x 112 and pass
 * through four stride-2 convolution + relu blocks, leaving a 7 x 7 grid of
 * feature cells plus a mean-pooled vector per image.
 */

import * as tf from '@tensorflow/tfjs'

import { DataError } from './errors'
import { DecodedImage } from './ppm'
import { SeededRng, hashSeed } from './rng'

export const INPUT_SIDE = 112
export const GRID_SIDE = 7
const KERNEL_SIZE = 3
const STRIDE = 2

/** Backbone name to per-block output channels; the last entry is the feature dim. */
export const BACKBONES: Record<string, readonly number[]> = {
  'conv4-64': [16, 32, 48, 64],
  'conv4-128': [24, 48, 96, 128],
}

export interface FeatureResult {
  /** GRID_SIDE x GRID_SIDE x depth cells, row-major. */
  spatial: Float32Array
  /** Mean over the grid cells, length depth. */
  pooled: Float32Array
  gridSide: number
  depth: number
}

export async function initBackend(): Promise<void> {
  await tf.setBackend('cpu')
  await tf.ready()
}

export class Backbone {
  readonly name: string
  readonly depth: number
  private readonly kernels: tf.Tensor4D[] = []
  private readonly biases: tf.Tensor1D[] = []

  constructor(name: string) {
    const channels = BACKBONES[name]
    if (!channels) {
      const known = Object.keys(BACKBONES).sort().join(', ')
      throw new DataError(`unknown backbone ${JSON.stringify(name)}, expected one of: ${known}`)
    }
    this.name = name
    this.depth = channels[channels.length - 1]
    let inDepth = 3
    for (let block = 0; block < channels.length; block++) {
      const outDepth = channels[block]
      const fanIn = KERNEL_SIZE * KERNEL_SIZE * inDepth
      // He-style uniform ranges; the positive bias tail keeps relu outputs
      // nonzero even for an all-black image, which the bank loader requires.
      const kernelRng = new SeededRng(hashSeed(`${name}/block${block}/kernel`))
      const biasRng = new SeededRng(hashSeed(`${name}/block${block}/bias`))
      const kernel = kernelRng.uniformArray(fanIn * outDepth, Math.sqrt(6 / fanIn))
      const bias = biasRng.uniformArray(outDepth, 1 / Math.sqrt(fanIn))
      this.kernels.push(tf.tensor4d(kernel, [KERNEL_SIZE, KERNEL_SIZE, inDepth, outDepth]))
      this.biases.push(tf.tensor1d(bias))
      inDepth = outDepth
    }
  }

  extract(image: DecodedImage): FeatureResult {
    const [spatial, pooled] = tf.tidy(() => {
      let x: tf.Tensor4D = tf
        .tensor3d(image.pixels, [image.height, image.width, 3])
        .expandDims(0)
      if (image.height !== INPUT_SIDE || image.width !== INPUT_SIDE) {
        x = tf.image.resizeBilinear(x, [INPUT_SIDE, INPUT_SIDE])
      }
      for (let block = 0; block < this.kernels.length; block++) {
        x = tf.relu(tf.add(tf.conv2d(x, this.kernels[block], STRIDE, 'same'), this.biases[block]))
      }
      const grid = x.squeeze([0]) as tf.Tensor3D
      // Copies detach the results from tensor storage the tidy releases.
      return [
        (grid.dataSync() as Float32Array).slice(),
        (grid.mean([0, 1]).dataSync() as Float32Array).slice(),
      ]
    })
    return { spatial, pooled, gridSide: GRID_SIDE, depth: this.depth }
  }

  dispose(): void {
    for (const kernel of this.kernels) kernel.dispose()
    for (const bias of this.biases) bias.dispose()
  }
}
